"""Corpus ingestion, deterministic splits, and the synthetic test corpus.

Corpus files are UTF-8 text with one document per line, or JSONL objects
{"text": ..., "boundaries": [byte offsets]} when gold morpheme boundaries
travel with the text.  Split assignment is a seeded shuffle with
largest-remainder rounding of the fractions, so the same manifest always
yields the same splits.  Invalid UTF-8 lines are skipped and counted,
never silently dropped.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from .byte_frontend import ZWNJ, ByteSequence, encode_document
from .errors import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class CorpusManifest:
    sources: tuple
    fractions: tuple = (0.90, 0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        self.sources = tuple(self.sources)
        self.fractions = tuple(self.fractions)
        if len(self.fractions) != 3:
            raise ValueError("manifest needs train/val/test fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder rounding; ties break toward the earlier split."""
    raw = [n * f for f in fractions]
    sizes = [int(x) for x in raw]
    remainders = [x - s for x, s in zip(raw, sizes)]
    short = n - sum(sizes)
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        sizes[i] += 1
    return sizes


def _parse_line(line: bytes, jsonl: bool, doc_id: str) -> ByteSequence | None:
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError:
        return None
    if jsonl:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{doc_id}: malformed JSONL line ({exc})") from exc
        if not isinstance(obj, dict) or "text" not in obj:
            raise DataError(f'{doc_id}: JSONL line missing "text"')
        boundaries = obj.get("boundaries")
        seq = encode_document(obj["text"], doc_id=doc_id, gold_boundaries=boundaries)
        if boundaries is not None:
            offs = np.asarray(boundaries, dtype=np.int64)
            if offs.size and (offs.min() < 0 or offs.max() >= len(seq)):
                raise DataError(
                    f"{doc_id}: gold boundary outside {len(seq)}-byte document"
                )
        return seq
    return encode_document(text.rstrip("\n"), doc_id=doc_id)


def _iter_file(path: str):
    jsonl = path.endswith(".jsonl")
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh):
            line = line.rstrip(b"\r\n")
            if not line:
                continue
            yield _parse_line(line, jsonl, f"{os.path.basename(path)}:{lineno}")


def count_documents(manifest: CorpusManifest) -> int:
    total = 0
    for path in manifest.sources:
        with open(path, "rb") as fh:
            total += sum(1 for line in fh if line.rstrip(b"\r\n"))
    return total


def split_assignment(manifest: CorpusManifest) -> dict:
    """Document index -> split name, deterministic in the manifest seed."""
    n = count_documents(manifest)
    sizes = split_sizes(n, manifest.fractions)
    rng = np.random.default_rng(manifest.seed)
    order = rng.permutation(n)
    assignment = {}
    cursor = 0
    for split, size in zip(SPLITS, sizes):
        for idx in order[cursor : cursor + size]:
            assignment[int(idx)] = split
        cursor += size
    return assignment


def load_corpus(manifest: CorpusManifest):
    """Per-split document generators.

    Documents stream file by file; only the index->split assignment is
    held in memory.  The generators share a skip counter exposed on the
    returned dict under "_skipped" after exhaustion.
    """
    assignment = split_assignment(manifest)
    stats = {"skipped": 0}

    def gen(split: str):
        index = 0
        for path in manifest.sources:
            for seq in _iter_file(path):
                if seq is None:
                    stats["skipped"] += 1
                    log.warning("skipped invalid UTF-8 line (total skipped: %d)",
                                stats["skipped"])
                    index += 1
                    continue
                if assignment.get(index) == split:
                    yield seq
                index += 1

    return {split: gen(split) for split in SPLITS} | {"_stats": stats}


def load_documents(paths) -> list[ByteSequence]:
    """Materialize every document of the given files (no split logic)."""
    docs = []
    skipped = 0
    for path in paths:
        for seq in _iter_file(path):
            if seq is None:
                skipped += 1
                continue
            docs.append(seq)
    if skipped:
        log.warning("skipped %d invalid UTF-8 lines", skipped)
    return docs


def write_jsonl(docs, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in docs:
            obj = {"text": seq.text}
            if seq.gold_boundaries is not None:
                obj["boundaries"] = [int(x) for x in seq.gold_boundaries]
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# Synthetic corpus with rule-derived morpheme boundaries
# --------------------------------------------------------------------------

PREFIXES = ("be", "na", "mi")
STEMS = ("tar", "kolu", "dun", "sipa", "vor", "meku")
SUFFIXES = ("an", "esh", "ut", "i")


@dataclass
class SyntheticSpec:
    n_docs: int = 64
    words_per_doc: int = 6
    prefix_prob: float = 0.4
    suffix_prob: float = 0.5
    zwnj_prob: float = 0.3
    seed: int = 0


def synthetic_corpus(spec: SyntheticSpec) -> list[ByteSequence]:
    """Seeded pseudo-morpheme documents with exact gold boundaries.

    Words are prefix?+stem+suffix? with an optional ZWNJ joiner at each
    morpheme junction.  Gold offsets mark the first byte of every
    morpheme; separator bytes (space, ZWNJ) attach to the preceding
    chunk."""
    rng = np.random.default_rng(spec.seed)
    docs = []
    for d in range(spec.n_docs):
        pieces: list[str] = []
        boundaries: list[int] = []
        byte_len = 0

        def emit(s: str, boundary: bool):
            nonlocal byte_len
            if boundary:
                boundaries.append(byte_len)
            pieces.append(s)
            byte_len += len(s.encode("utf-8"))

        for w in range(spec.words_per_doc):
            if w > 0:
                emit(" ", boundary=False)
            morphemes = []
            if rng.random() < spec.prefix_prob:
                morphemes.append(PREFIXES[rng.integers(len(PREFIXES))])
            morphemes.append(STEMS[rng.integers(len(STEMS))])
            if rng.random() < spec.suffix_prob:
                morphemes.append(SUFFIXES[rng.integers(len(SUFFIXES))])
            for mi, morpheme in enumerate(morphemes):
                emit(morpheme, boundary=True)
                if mi < len(morphemes) - 1 and rng.random() < spec.zwnj_prob:
                    emit(ZWNJ, boundary=False)
        text = "".join(pieces)
        docs.append(encode_document(text, doc_id=f"synth-{d}", gold_boundaries=boundaries))
    return docs
