"""Document-to-bytes conversion and byte-level input features.

Documents become UTF-8 byte sequences with a per-byte flag marking the
three bytes of every zero-width non-joiner (U+200C).  The input embedding
adds a dedicated vector on flagged bytes so the model can treat the
invisible joiner differently from visible characters.  Also provides the
decoder-side byte-type classes and sinusoidal positional encodings.

All functions are pure over immutable inputs; inputs are taken verbatim
(no Unicode normalization).
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, embedding_lookup, mul

ZWNJ = "‌"
ZWNJ_BYTES = ZWNJ.encode("utf-8")  # 0xE2 0x80 0x8C

ALPHABETIC, NUMERIC, PUNCTUATION, CONTROL = 0, 1, 2, 3
BYTE_CLASS_NAMES = ("alphabetic", "numeric", "punctuation", "control")
NUM_BYTE_CLASSES = 4


@dataclass
class ByteSequence:
    """UTF-8 bytes of one document plus per-byte ZWNJ flags."""

    bytes: np.ndarray  # uint8, length T
    zwnj_flag: np.ndarray  # bool, length T
    doc_id: str = ""
    gold_boundaries: np.ndarray | None = None  # optional byte offsets

    def __post_init__(self):
        self.bytes = np.asarray(self.bytes, dtype=np.uint8)
        self.zwnj_flag = np.asarray(self.zwnj_flag, dtype=bool)
        if self.bytes.shape != self.zwnj_flag.shape:
            raise ValueError("ByteSequence: bytes and zwnj_flag lengths differ")
        if self.gold_boundaries is not None:
            self.gold_boundaries = np.asarray(self.gold_boundaries, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.bytes)

    @property
    def text(self) -> str:
        return self.bytes.tobytes().decode("utf-8")


def encode_document(text: str, doc_id: str = "", gold_boundaries=None) -> ByteSequence:
    """Encode a document to bytes, flagging every byte of each U+200C.

    UTF-8 is self-synchronizing, so the ZWNJ byte triple cannot occur
    inside any other codepoint's encoding; a byte-pattern scan is exact.
    """
    raw = text.encode("utf-8")
    data = np.frombuffer(raw, dtype=np.uint8).copy()
    flags = np.zeros(len(raw), dtype=bool)
    start = raw.find(ZWNJ_BYTES)
    while start != -1:
        flags[start : start + 3] = True
        start = raw.find(ZWNJ_BYTES, start + 3)
    return ByteSequence(data, flags, doc_id=doc_id, gold_boundaries=gold_boundaries)


@dataclass
class ByteEmbeddingTable:
    """256-row byte embedding plus the additive ZWNJ vector."""

    byte_embed: Tensor  # (256, d)
    zwnj_embed: Tensor  # (d,)

    def __post_init__(self):
        if self.byte_embed.shape[0] != 256:
            raise ValueError("byte_embed must have 256 rows")
        if self.zwnj_embed.shape != (self.byte_embed.shape[1],):
            raise ValueError("zwnj_embed dimension does not match byte_embed")


def init_byte_embedding(rng: np.random.Generator, dim: int, dtype=np.float64) -> ByteEmbeddingTable:
    return ByteEmbeddingTable(
        byte_embed=Tensor(
            (rng.standard_normal((256, dim)) * 0.02).astype(dtype), requires_grad=True
        ),
        zwnj_embed=Tensor(
            (rng.standard_normal(dim) * 0.02).astype(dtype), requires_grad=True
        ),
    )


def embed_bytes(seq: ByteSequence, table: ByteEmbeddingTable) -> Tensor:
    """Row t is byte_embed[x_t], plus zwnj_embed where the flag is set."""
    base = embedding_lookup(table.byte_embed, seq.bytes.astype(np.int64))
    if not seq.zwnj_flag.any():
        return base
    mask = Tensor(seq.zwnj_flag.astype(base.dtype)[:, None])
    return add(base, mul(mask, table.zwnj_embed))


def _category_class(ch: str) -> int:
    cat = unicodedata.category(ch)
    if cat.startswith("L"):
        return ALPHABETIC
    if cat.startswith("N"):
        return NUMERIC
    if cat[0] in ("P", "S", "Z"):
        return PUNCTUATION
    return CONTROL


def classify_sequence(seq: ByteSequence) -> np.ndarray:
    """Per-byte class from the Unicode general category of the codepoint
    each byte belongs to; continuation bytes inherit the lead byte's
    class; bytes of undecodable spans fall back to control."""
    out = np.full(len(seq), CONTROL, dtype=np.int64)
    raw = seq.bytes.tobytes()
    pos = 0
    while pos < len(raw):
        width = 1
        lead = raw[pos]
        if lead < 0x80:
            width = 1
        elif lead >> 5 == 0b110:
            width = 2
        elif lead >> 4 == 0b1110:
            width = 3
        elif lead >> 3 == 0b11110:
            width = 4
        chunk = raw[pos : pos + width]
        try:
            ch = chunk.decode("utf-8")
            out[pos : pos + width] = _category_class(ch)
        except UnicodeDecodeError:
            out[pos] = CONTROL
            width = 1
        pos += width
    return out


def classify_byte(byte: int, context: ByteSequence, position: int) -> int:
    """Class of the codepoint that the byte at ``position`` belongs to."""
    if not 0 <= position < len(context):
        raise ValueError(f"classify_byte: position {position} outside document")
    classes = classify_sequence(context)
    return int(classes[position])


def positional_encoding(position: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding, sin/cos interleaved, base 10000."""
    if dim % 2 != 0:
        raise ValueError(f"positional_encoding: dim must be even, got {dim}")
    return positional_encoding_matrix(np.array([position]), dim)[0]


def positional_encoding_matrix(positions, dim: int, dtype=np.float64) -> np.ndarray:
    if dim % 2 != 0:
        raise ValueError(f"positional_encoding: dim must be even, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    angles = positions[:, None] * freqs[None, :]
    out = np.empty((len(positions), dim), dtype=dtype)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
