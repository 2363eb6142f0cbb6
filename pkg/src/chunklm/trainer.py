"""Training loop: three-stage sequence-length curriculum, AdamW with
linear warmup and cosine decay, global-norm gradient clipping, and
deterministic micro-batch accumulation.

Determinism contract: two runs with the same config and seed produce
bit-identical metric logs.  All randomness flows from generators seeded
by (config seed, step, document slot), and gradient accumulation sums
per-document contributions in a fixed order, so accumulating k
micro-batches is arithmetically identical to one fused batch of their
union.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .byte_frontend import ByteSequence
from .config import CurriculumConfig, OptimizerConfig, RunConfig
from .errors import NumericError
from .model import Model
from .objective import LossWeights, NonFiniteLossError
from .router import temperature_schedule


# --------------------------------------------------------------------------
# Schedules
# --------------------------------------------------------------------------

def _scaled(value: int, scale: int) -> int:
    return max(1, value // scale)


def curriculum_stage(step: int, cfg: CurriculumConfig) -> str:
    if step < _scaled(cfg.warmup_end, cfg.scale):
        return "warmup"
    if step < _scaled(cfg.growth_end, cfg.scale):
        return "growth"
    return "full"


def curriculum_sample_length(step: int, rng: np.random.Generator, cfg: CurriculumConfig) -> int:
    """Sequence length in bytes for this step.

    warmup: fixed; growth: categorical over the configured lengths;
    full: uniform over [1, cap].  The scale divisor shrinks every
    boundary and length proportionally for desk-scale runs.
    """
    if step < 0:
        raise ValueError("curriculum_sample_length: step must be >= 0")
    stage = curriculum_stage(step, cfg)
    if stage == "warmup":
        return _scaled(cfg.warmup_len, cfg.scale)
    if stage == "growth":
        lengths = [_scaled(l, cfg.scale) for l in cfg.growth_lengths]
        idx = rng.choice(len(lengths), p=np.asarray(cfg.growth_probs))
        return lengths[idx]
    return int(rng.integers(1, _scaled(cfg.full_cap, cfg.scale) + 1))


def lr_schedule(step: int, cfg: OptimizerConfig, total_steps: int) -> float:
    """Linear 0 -> peak over the warmup, then cosine peak -> floor over
    the remaining horizon.  Continuous at the junction, exact at both
    endpoints."""
    if step < 0:
        raise ValueError("lr_schedule: step must be >= 0")
    warmup = cfg.warmup_steps
    if warmup > 0 and step < warmup:
        return cfg.peak_lr * step / warmup
    if step == warmup:
        return cfg.peak_lr  # exact peak at the junction
    if step >= total_steps:
        return cfg.floor_lr  # exact floor at the horizon
    span = max(1, total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads, max_norm: float = 1.0):
    """Scale all gradients by max_norm/norm when the global L2 norm
    exceeds max_norm; direction is preserved."""
    grads = list(grads)
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def empty(cls) -> "AdamState":
        return cls(m={}, v={})


def adamw_step(named_params, grads: dict, state: AdamState, step: int, lr: float,
               cfg: OptimizerConfig) -> None:
    """Decoupled-weight-decay Adam update with bias correction.

    ``step`` counts completed updates (0 on the first call).  Non-finite
    gradients abort with the parameter name.
    """
    t = step + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, param in named_params:
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        g = g.astype(param.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        param.data = param.data - lr * update - lr * cfg.weight_decay * param.data


# --------------------------------------------------------------------------
# Document handling
# --------------------------------------------------------------------------

def _snap_to_codepoints(raw: bytes, start: int, end: int) -> tuple[int, int]:
    # advance past continuation bytes, then trim a trailing partial codepoint
    n = len(raw)
    while start < n and (raw[start] & 0xC0) == 0x80:
        start += 1
    while end > start and (raw[end - 1] & 0xC0) == 0x80:
        end -= 1
    if end > start and raw[end - 1] >= 0xC0:
        end -= 1  # lone lead byte
    return start, end


def crop_document(seq: ByteSequence, max_len: int, rng: np.random.Generator) -> ByteSequence:
    """Use short documents whole; crop long ones at a seeded random byte
    offset, snapped outward to codepoint boundaries so the result stays
    valid UTF-8.  Gold offsets are remapped into the crop window."""
    T = len(seq)
    if T <= max_len:
        return seq
    start = int(rng.integers(0, T - max_len + 1))
    end = start + max_len
    raw = seq.bytes.tobytes()
    start, end = _snap_to_codepoints(raw, start, end)
    if end <= start:  # degenerate window (one huge codepoint); fall back
        start, end = _snap_to_codepoints(raw, 0, min(T, max(4, max_len)))
    gold = None
    if seq.gold_boundaries is not None:
        inside = seq.gold_boundaries[
            (seq.gold_boundaries >= start) & (seq.gold_boundaries < end)
        ]
        gold = inside - start
    return ByteSequence(
        seq.bytes[start:end].copy(),
        seq.zwnj_flag[start:end].copy(),
        doc_id=seq.doc_id,
        gold_boundaries=gold,
    )


# --------------------------------------------------------------------------
# The loop
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    metrics_path: str
    final_checkpoint: str
    last_record: dict
    model: "Model"


def effective_kl_weight(step: int, base: float, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base
    return base * min(1.0, step / warmup_steps)


def train(config: RunConfig, documents, out_dir: str | None = None) -> TrainResult:
    """Run the full training loop over in-memory documents.

    ``documents`` is a sequence of ByteSequence (gold boundaries optional
    per document).  Writes metrics.jsonl and periodic checkpoints under
    ``out_dir``; a NaN loss writes a crash checkpoint and raises.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    docs = list(documents)
    if not docs:
        raise ValueError("train: empty corpus")
    out_dir = out_dir or config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    model = Model(config.model, seed=config.train.seed)
    state = AdamState.empty()
    weights_base = LossWeights(
        kl_weight=config.loss.kl_weight,
        morph_weight=config.loss.morph_weight,
        aux_weight=config.loss.aux_weight,
        label_smoothing=config.loss.label_smoothing,
    )
    names = [name for name, _ in model.named_parameters()]
    seed = config.train.seed
    len_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    pick_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0C5]))
    total_docs = config.train.micro_batches * config.train.docs_per_micro_batch

    last_record: dict = {}
    with open(metrics_path, "w", encoding="utf-8") as log:
        for step in range(config.train.total_steps):
            tau = temperature_schedule(step)
            lr = lr_schedule(step, config.optimizer, config.train.total_steps)
            target_len = curriculum_sample_length(step, len_rng, config.curriculum)
            kl_w = effective_kl_weight(step, weights_base.kl_weight, config.loss.kl_warmup_steps)
            weights = LossWeights(
                kl_weight=kl_w,
                morph_weight=weights_base.morph_weight,
                aux_weight=weights_base.aux_weight,
                label_smoothing=weights_base.label_smoothing,
            )

            picks = pick_rng.integers(0, len(docs), size=total_docs)
            model.zero_grads()
            sums = {"lm": 0.0, "kl": 0.0, "aux": 0.0, "total": 0.0}
            morph_sum, morph_docs = 0.0, 0
            level_positions: list[float] = []
            level_chunks: list[float] = []
            for slot, doc_idx in enumerate(picks):
                doc_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, step, slot])
                )
                seq = crop_document(docs[doc_idx], target_len, doc_rng)
                with ad.Tape() as tape:
                    lb = model.losses(
                        seq,
                        weights,
                        target_rate=config.loss.target_rate,
                        length_cap=config.loss.length_cap,
                        mode="hard-st",
                        train=True,
                        rng=doc_rng,
                        temperature=tau,
                    )
                    scaled = ad.mul(lb.total, 1.0 / total_docs)
                if not np.isfinite(lb.total.item()):
                    crash = os.path.join(out_dir, "crash.ckpt")
                    save_checkpoint(model, crash, config=config, step=step)
                    raise NonFiniteLossError(
                        f"non-finite total loss at step {step}; crash checkpoint at {crash}"
                    )
                ad.backward(tape, scaled)
                vals = lb.component_values()
                for key in sums:
                    sums[key] += vals[key] / total_docs
                if lb.morph is not None:
                    morph_sum += vals["morph"]
                    morph_docs += 1
                lengths = [len(seq)] + [
                    len(cs.starts) for cs in lb.result.hierarchy.chunksets
                ]
                if not level_positions:
                    level_positions = [0.0] * (len(lengths) - 1)
                    level_chunks = [0.0] * (len(lengths) - 1)
                for li in range(len(lengths) - 1):
                    level_positions[li] += lengths[li]
                    level_chunks[li] += lengths[li + 1]

            grads = {n: t.grad for n, t in model.named_parameters() if t.grad is not None}
            clipped = clip_gradients(list(grads.values()), config.optimizer.clip_norm)
            grads = dict(zip(grads.keys(), clipped))
            adamw_step(model.named_parameters(), grads, state, step, lr, config.optimizer)

            record = {
                "step": step,
                "lm": sums["lm"],
                "kl": sums["kl"],
                "morph": (morph_sum / morph_docs) if morph_docs else 0.0,
                "aux": sums["aux"],
                "total": sums["total"],
                "lr": lr,
                "tau": tau,
                "mean_chunk_len": [
                    p / c if c else 0.0 for p, c in zip(level_positions, level_chunks)
                ],
            }
            log.write(json.dumps(record) + "\n")
            last_record = record

            interval = config.train.checkpoint_interval
            if interval > 0 and (step + 1) % interval == 0:
                save_checkpoint(
                    model,
                    os.path.join(out_dir, f"step_{step + 1}.ckpt"),
                    config=config,
                    step=step + 1,
                )

    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(model, final, config=config, step=config.train.total_steps)
    return TrainResult(
        steps=config.train.total_steps,
        metrics_path=metrics_path,
        final_checkpoint=final,
        last_record=last_record,
        model=model,
    )
