"""Orthographic-corruption transforms for robustness sweeps.

Four seeded, rate-controlled transforms: ZWNJ corruption (delete or
replace each joiner with a space, at equal odds), removal of a fixed set
of combining marks, substitution of visually similar Arabic letters, and
word reordering inside 3-token windows.  Identical (text, rate, seed)
always produces identical output, and every transform touches only the
codepoints in its target set.

The character tables are fixed constants here but can be overridden via
a JSON config (see the CLI's --tables flag).
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass

import numpy as np

from .byte_frontend import ZWNJ
from .errors import DataError

# U+064B..U+0652 (tanwin/harakat), hamza above, superscript alef, tatweel
DIACRITICS = frozenset(
    {chr(cp) for cp in range(0x064B, 0x0653)} | {"ٔ", "ٰ", "ـ"}
)

# Persian letter -> visually similar Arabic letter
SUBSTITUTIONS = {
    "ی": "ي",  # Persian yeh -> Arabic yeh
    "ک": "ك",  # keheh -> kaf
}
WORD_FINAL_SUBSTITUTIONS = {
    "ه": "ة",  # heh -> teh marbuta, word-finally only
}

CORRUPTION_KINDS = ("zwnj", "diacritic", "substitution", "reorder")
REORDER_WINDOW = 3


@dataclass
class CorruptionSpec:
    kind: str
    rate: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"corruption rate {self.rate} outside [0, 1]")


def corrupt_zwnj(text: str, rate: float, seed: int) -> str:
    """Each ZWNJ is corrupted independently with the given probability;
    a corrupted joiner is deleted or replaced by an ASCII space at equal
    odds.  All other codepoints pass through untouched."""
    rng = np.random.default_rng(seed)
    out = []
    for ch in text:
        if ch == ZWNJ and rng.random() < rate:
            if rng.random() < 0.5:
                continue  # delete
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def remove_diacritics(text: str, table=None) -> str:
    """Delete every codepoint in the diacritic set; idempotent."""
    marks = DIACRITICS if table is None else frozenset(table)
    return "".join(ch for ch in text if ch not in marks)


def _is_word_final(text: str, index: int) -> bool:
    if index + 1 >= len(text):
        return True
    nxt = text[index + 1]
    if nxt.isspace():
        return True
    return unicodedata.category(nxt).startswith("P")


def substitute_arabic(
    text: str,
    rate: float,
    seed: int,
    table=None,
    word_final_table=None,
) -> str:
    """Swap each mapped codepoint with probability ``rate``; the
    heh-to-teh-marbuta mapping applies only word-finally (whitespace or
    punctuation lookahead)."""
    rng = np.random.default_rng(seed)
    subs = SUBSTITUTIONS if table is None else dict(table)
    finals = WORD_FINAL_SUBSTITUTIONS if word_final_table is None else dict(word_final_table)
    out = []
    for i, ch in enumerate(text):
        if ch in subs:
            out.append(subs[ch] if rng.random() < rate else ch)
        elif ch in finals and _is_word_final(text, i):
            out.append(finals[ch] if rng.random() < rate else ch)
        else:
            out.append(ch)
    return "".join(out)


def reorder_words(text: str, rate: float, seed: int) -> str:
    """Whitespace-tokenize, permute each consecutive 3-token window with
    probability ``rate``, rejoin with single spaces.  Token multiset is
    preserved and no token moves more than 2 positions."""
    rng = np.random.default_rng(seed)
    tokens = text.split()
    out = []
    for i in range(0, len(tokens), REORDER_WINDOW):
        window = tokens[i : i + REORDER_WINDOW]
        if len(window) > 1 and rng.random() < rate:
            window = [window[j] for j in rng.permutation(len(window))]
        out.extend(window)
    return " ".join(out)


def apply_corruption(text: str, spec: CorruptionSpec, tables: dict | None = None) -> str:
    tables = tables or {}
    if spec.kind == "zwnj":
        return corrupt_zwnj(text, spec.rate, spec.seed)
    if spec.kind == "diacritic":
        return remove_diacritics(text, table=tables.get("diacritics"))
    if spec.kind == "substitution":
        return substitute_arabic(
            text,
            spec.rate,
            spec.seed,
            table=tables.get("substitutions"),
            word_final_table=tables.get("word_final_substitutions"),
        )
    return reorder_words(text, spec.rate, spec.seed)


def load_tables(path: str) -> dict:
    """Read override tables from JSON: codepoints as 4+ hex digit strings."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    out: dict = {}
    try:
        if "diacritics" in raw:
            out["diacritics"] = frozenset(chr(int(cp, 16)) for cp in raw["diacritics"])
        if "substitutions" in raw:
            out["substitutions"] = {
                chr(int(k, 16)): chr(int(v, 16)) for k, v in raw["substitutions"].items()
            }
        if "word_final_substitutions" in raw:
            out["word_final_substitutions"] = {
                chr(int(k, 16)): chr(int(v, 16))
                for k, v in raw["word_final_substitutions"].items()
            }
    except (TypeError, ValueError) as exc:
        raise DataError(f"corruption tables {path}: {exc}") from exc
    unknown = set(raw) - {"diacritics", "substitutions", "word_final_substitutions"}
    if unknown:
        raise DataError(f"corruption tables {path}: unknown keys {sorted(unknown)}")
    return out
