"""Evaluation metrics: bits per byte, boundary precision/recall/F1,
chunk-type statistics, and per-level compression ratios.

All metrics run the model in eval mode (argmax gates, latent = posterior
mean), so they are deterministic and invariant to document order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .byte_frontend import ByteSequence
from .errors import DataError

LN2 = math.log(2.0)

CHUNK_CATEGORIES = ("simple", "compound", "clitic", "punctuation", "other")


@dataclass
class SegmentationResult:
    precision: float
    recall: float
    f1: float
    true_positives: int
    predicted: int
    gold: int


@dataclass
class ChunkStats:
    length_histogram: dict
    category_frequency: dict
    category_mean_length: dict
    total_chunks: int


def bits_per_byte(model, corpus) -> float:
    """Mean negative log2-likelihood per byte over the corpus."""
    total_nll = 0.0
    total_bytes = 0
    for seq in corpus:
        log_probs = model.document_log_probs(seq)
        total_nll += float(-log_probs.sum())
        total_bytes += len(seq)
    if total_bytes == 0:
        raise DataError("bits_per_byte: empty corpus")
    return total_nll / (LN2 * total_bytes)


def segmentation_prf(predicted, gold) -> SegmentationResult:
    """Set-based boundary scoring.  Offset 0 is excluded (trivially a
    boundary); empty-vs-nonempty sides score 0, empty-vs-empty scores 1."""
    pred = {int(p) for p in predicted if int(p) != 0}
    gold_set = {int(g) for g in gold if int(g) != 0}
    tp = len(pred & gold_set)
    if not pred and not gold_set:
        precision = recall = f1 = 1.0
    else:
        precision = tp / len(pred) if pred else 0.0
        recall = tp / len(gold_set) if gold_set else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SegmentationResult(
        precision=precision,
        recall=recall,
        f1=f1,
        true_positives=tp,
        predicted=len(pred),
        gold=len(gold_set),
    )


def _chunk_texts(seq: ByteSequence, starts: np.ndarray):
    ends = np.append(starts[1:], len(seq))
    raw = seq.bytes.tobytes()
    for s, e in zip(starts, ends):
        yield raw[s:e].decode("utf-8", errors="replace"), int(e - s)


def chunk_statistics(model, corpus, lexicon: dict | None = None) -> ChunkStats:
    """Level-1 chunk length histogram and category mix.

    ``lexicon`` maps chunk text to one of the category names; untagged
    chunks count as "other".  Frequencies sum to 1."""
    lexicon = lexicon or {}
    length_hist: Counter = Counter()
    counts: Counter = Counter()
    length_sum: Counter = Counter()
    total = 0
    for seq in corpus:
        starts = model.segment(seq, level=1)
        for text, length in _chunk_texts(seq, starts):
            category = lexicon.get(text.strip(), "other")
            if category not in CHUNK_CATEGORIES:
                raise DataError(f"lexicon maps {text!r} to unknown category {category!r}")
            length_hist[length] += 1
            counts[category] += 1
            length_sum[category] += length
            total += 1
    if total == 0:
        raise DataError("chunk_statistics: empty corpus")
    return ChunkStats(
        length_histogram=dict(sorted(length_hist.items())),
        category_frequency={c: counts[c] / total for c in counts},
        category_mean_length={c: length_sum[c] / counts[c] for c in counts},
        total_chunks=total,
    )


def compression_ratio(model, corpus) -> list:
    """Bytes per chunk at every router level (cumulative compression)."""
    total_bytes = 0
    chunk_totals: list[int] = []
    for seq in corpus:
        counts = model.chunk_counts(seq)
        if not chunk_totals:
            chunk_totals = [0] * len(counts)
        total_bytes += len(seq)
        for i, c in enumerate(counts):
            chunk_totals[i] += c
    if total_bytes == 0:
        raise DataError("compression_ratio: empty corpus")
    return [total_bytes / c for c in chunk_totals]
