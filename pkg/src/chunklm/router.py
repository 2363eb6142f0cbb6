"""Hierarchical boundary router.

Each level runs a 2-layer bidirectional GRU, predicts a per-position
boundary probability through an MLP head, samples binary gates with the
straight-through binary-concrete estimator, and mean-pools hidden states
over the gated spans.  Chunk embeddings of level l become the input
positions of level l+1, so sequence length is non-increasing up the
hierarchy.

Gate semantics: gate[t] = 1 means position t starts a new chunk.  The
gate at position 0 is forced to 1 so every input yields at least one
chunk.  In hard modes the pooled embedding is the exact arithmetic mean
of the span; in soft mode the pooling weights come from cumulative
products of (1 - gate), which reduces to the mean in the hard limit.
Gradients reach the gate values through those pooling weights, so
routing decisions stay trainable even with discrete forward values.

Parameters are immutable during a forward pass; independent sequences
may be routed concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .recurrent import gru_layer, init_gru

MODES = ("soft", "hard-st", "argmax")


def _normalize_mode(mode: str) -> str:
    m = mode.lower().replace("_", "-")
    if m not in MODES:
        raise ValueError(f"unknown routing mode {mode!r}; expected one of {MODES}")
    return m


@dataclass
class GruParams:
    wx: Tensor
    wh: Tensor
    bx: Tensor
    bh: Tensor


@dataclass
class BoundaryMlpParams:
    """Two hidden ReLU layers with post-hidden dropout, layer norm on the
    last hidden, then a single-logit projection."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    w3: Tensor
    b3: Tensor


@dataclass
class RouterLevelParams:
    # layers[i] = (forward-direction GRU, backward-direction GRU)
    layers: list
    boundary: BoundaryMlpParams


@dataclass
class LevelTrace:
    """Per-level forward artifacts kept for losses and boundary extraction."""

    hidden: Tensor  # (T_l, 2H)
    probs: Tensor  # (T_l,)
    gates: Tensor  # (T_l,), binary in hard/argmax modes


@dataclass
class ChunkSet:
    """Partition of one level's positions plus pooled chunk embeddings."""

    starts: np.ndarray  # strictly increasing, starts[0] == 0
    embeddings: Tensor  # (K, 2H)

    def __post_init__(self):
        self.starts = np.asarray(self.starts, dtype=np.int64)

    def span_sizes(self, total_len: int) -> np.ndarray:
        ends = np.append(self.starts[1:], total_len)
        return ends - self.starts


def init_router_level(
    rng: np.random.Generator,
    d_in: int,
    hidden: int,
    mlp_hidden: tuple[int, int] = (512, 256),
    dtype=np.float64,
) -> RouterLevelParams:
    layers = []
    for layer_idx in range(2):
        layer_in = d_in if layer_idx == 0 else 2 * hidden
        fwd = GruParams(**init_gru(rng, layer_in, hidden, dtype))
        bwd = GruParams(**init_gru(rng, layer_in, hidden, dtype))
        layers.append((fwd, bwd))
    h1, h2 = mlp_hidden
    d_hid = 2 * hidden

    def lin(n_in, n_out):
        a = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-a, a, (n_in, n_out)).astype(dtype), requires_grad=True)

    boundary = BoundaryMlpParams(
        w1=lin(d_hid, h1),
        b1=Tensor(np.zeros(h1, dtype=dtype), requires_grad=True),
        w2=lin(h1, h2),
        b2=Tensor(np.zeros(h2, dtype=dtype), requires_grad=True),
        ln_gain=Tensor(np.ones(h2, dtype=dtype), requires_grad=True),
        ln_bias=Tensor(np.zeros(h2, dtype=dtype), requires_grad=True),
        w3=lin(h2, 1),
        b3=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
    )
    return RouterLevelParams(layers=layers, boundary=boundary)


def bigru(x: Tensor, params: RouterLevelParams) -> Tensor:
    out = x
    for fwd, bwd in params.layers:
        f = gru_layer(out, fwd.wx, fwd.wh, fwd.bx, fwd.bh)
        b = gru_layer(out, bwd.wx, bwd.wh, bwd.bx, bwd.bh, reverse=True)
        out = ad.concat([f, b], axis=1)
    return out


def boundary_logits(
    hidden: Tensor,
    mlp: BoundaryMlpParams,
    dropout_rate: float = 0.1,
    rng=None,
    train: bool = False,
) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(hidden, mlp.w1), mlp.b1))
    h = ad.dropout(h, dropout_rate, seed=rng, train=train)
    h = ad.relu(ad.add(ad.matmul(h, mlp.w2), mlp.b2))
    h = ad.dropout(h, dropout_rate, seed=rng, train=train)
    h = ad.layernorm(h, mlp.ln_gain, mlp.ln_bias)
    logits = ad.add(ad.matmul(h, mlp.w3), mlp.b3)
    return ad.reshape(logits, (hidden.shape[0],))


def logistic_noise(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Difference of two independent standard Gumbels ~ Logistic(0, 1)."""
    u = rng.random(shape)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


def gumbel_gate(logits: Tensor, temperature: float, noise: np.ndarray, hard: bool) -> Tensor:
    """Binary-concrete gate: sigmoid((logit + noise)/temperature).

    Hard mode thresholds the forward value at 0.5 and passes the soft
    gradient straight through.  P(gate=1) = sigmoid(logit) for any
    temperature, because the noise is Logistic(0, 1).
    """
    if temperature <= 0:
        raise ValueError(f"gumbel_gate: temperature must be positive, got {temperature}")
    shifted = ad.add(logits, Tensor(np.asarray(noise, dtype=logits.dtype)))
    soft = ad.sigmoid(ad.mul(shifted, 1.0 / temperature))
    if hard:
        return ad.st_round(soft)
    return soft


def sample_gate_st(logit, temperature: float, noise_seed, hard: bool) -> Tensor:
    """Single-gate convenience wrapper over :func:`gumbel_gate`."""
    t = logit if isinstance(logit, Tensor) else Tensor(np.asarray(logit, dtype=np.float64))
    rng = (
        noise_seed
        if isinstance(noise_seed, np.random.Generator)
        else np.random.default_rng(noise_seed)
    )
    noise = logistic_noise(rng, t.shape, dtype=t.dtype)
    return gumbel_gate(t, temperature, noise, hard)


def temperature_schedule(step: int) -> float:
    """Exponential anneal with a hard floor: max(0.1, 5.0 * 0.99995^step)."""
    if step < 0:
        raise ValueError("temperature_schedule: step must be >= 0")
    return max(0.1, 5.0 * 0.99995 ** step)


def force_first_gate(gates: Tensor) -> Tensor:
    """Pin gate[0] to 1 so the partition is never empty."""
    one = Tensor(np.ones(1, dtype=gates.dtype))
    if gates.shape[0] == 1:
        return one
    return ad.concat([one, ad.slice_(gates, slice(1, None))], axis=0)


def run_level(
    inputs: Tensor,
    params: RouterLevelParams,
    temperature: float,
    mode: str,
    rng=None,
    train: bool = False,
    dropout_rate: float = 0.1,
) -> LevelTrace:
    mode = _normalize_mode(mode)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError(f"run_level: expected non-empty (T, d) input, got {inputs.shape}")
    hidden = bigru(inputs, params)
    logits = boundary_logits(hidden, params.boundary, dropout_rate, rng, train)
    probs = ad.sigmoid(logits)
    if mode == "argmax":
        gates = Tensor((probs.data > 0.5).astype(probs.dtype))
    else:
        if rng is None:
            raise ValueError("run_level: sampling modes need an rng")
        noise = logistic_noise(rng, logits.shape, dtype=logits.dtype)
        gates = gumbel_gate(logits, temperature, noise, hard=(mode == "hard-st"))
    gates = force_first_gate(gates)
    return LevelTrace(hidden=hidden, probs=probs, gates=gates)


# --------------------------------------------------------------------------
# Span pooling
# --------------------------------------------------------------------------

def _spans_and_weights(gates: np.ndarray):
    """Hard spans from thresholded gates plus the cumulative-product
    pooling weights.  With exact {0,1} gates every weight is 1."""
    starts = np.flatnonzero(gates > 0.5)
    if len(starts) == 0 or starts[0] != 0:
        raise ValueError("pooling requires gate[0] == 1")
    T = len(gates)
    ends = np.append(starts[1:], T)
    w = np.empty_like(gates)
    for s, e in zip(starts, ends):
        w[s] = gates[s]
        if e > s + 1:
            w[s + 1 : e] = gates[s] * np.cumprod(1.0 - gates[s + 1 : e])
    return starts, ends, w


def _weight_grad_to_gates(gates, starts, ends, w, dw):
    """Backprop through w[t] = g[s] * prod_{u<=t}(1 - g[u])."""
    dg = np.zeros_like(gates)
    c = dw * w
    for s, e in zip(starts, ends):
        seg = c[s:e]
        dg[s] = seg.sum() / gates[s]
        if e > s + 1:
            suffix = np.cumsum(seg[::-1])[::-1]
            dg[s + 1 : e] = -suffix[1:] / (1.0 - gates[s + 1 : e])
    return dg


def st_mean_pool(hidden: Tensor, gates: Tensor):
    """Pool hidden rows over gate spans; returns ((K, d) embeddings, starts).

    Forward value in hard modes is the exact per-span mean.  Backward
    routes gradient to the hidden rows and, via the pooling weights, to
    the gate values.
    """
    g = gates.data
    starts, ends, w = _spans_and_weights(g)
    h = hidden.data
    K = len(starts)
    sums = np.add.reduceat(w[:, None] * h, starts, axis=0)
    totals = np.add.reduceat(w, starts)
    pooled = sums / totals[:, None]
    out = Tensor(pooled.astype(h.dtype, copy=False))

    spans_of = np.repeat(np.arange(K), ends - starts)

    def bwd(g_out):
        per_pos = g_out[spans_of]  # (T, d)
        dh = w[:, None] * per_pos / totals[spans_of][:, None]
        dw = ((h - pooled[spans_of]) * per_pos).sum(axis=1) / totals[spans_of]
        dg = _weight_grad_to_gates(g, starts, ends, w, dw)
        return dh, dg

    ad.record_op((hidden, gates), (out,), bwd)
    return out, starts


def span_soft_lengths(gates: Tensor) -> Tensor:
    """Differentiable span lengths: sum of pooling weights per span.

    Equals the integer span length whenever gates are exactly {0,1};
    gradients encourage opening gates inside overlong spans.
    """
    g = gates.data
    starts, ends, w = _spans_and_weights(g)
    totals = np.add.reduceat(w, starts)
    out = Tensor(totals.astype(g.dtype, copy=False))
    K = len(starts)
    spans_of = np.repeat(np.arange(K), ends - starts)

    def bwd(g_out):
        dw = g_out[spans_of]
        return (_weight_grad_to_gates(g, starts, ends, w, dw),)

    ad.record_op((gates,), (out,), bwd)
    return out


def pool_chunks(trace: LevelTrace) -> ChunkSet:
    embeddings, starts = st_mean_pool(trace.hidden, trace.gates)
    return ChunkSet(starts=starts, embeddings=embeddings)


# --------------------------------------------------------------------------
# Hierarchy
# --------------------------------------------------------------------------

@dataclass
class HierarchyOutput:
    traces: list
    chunksets: list

    @property
    def final(self) -> ChunkSet:
        return self.chunksets[-1]


def run_hierarchy(
    byte_embeddings: Tensor,
    levels: list,
    temperature: float,
    mode: str,
    rng=None,
    train: bool = False,
    dropout_rate: float = 0.1,
) -> HierarchyOutput:
    if not levels:
        raise ValueError("run_hierarchy: need at least one level")
    traces, chunksets = [], []
    x = byte_embeddings
    for params in levels:
        trace = run_level(x, params, temperature, mode, rng=rng, train=train,
                          dropout_rate=dropout_rate)
        chunks = pool_chunks(trace)
        traces.append(trace)
        chunksets.append(chunks)
        x = chunks.embeddings
    return HierarchyOutput(traces=traces, chunksets=chunksets)


def router_aux_loss(
    traces: list,
    target_rate,
    length_cap: float,
) -> Tensor:
    """Load balancing plus chunk-length regularization.

    sum_l (mean(probs_l) - target_l)^2 + mean over level-1 chunks of
    max(0, length - cap)^2.  The length term uses the differentiable
    span lengths, whose value equals the integer length in hard mode.
    """
    rates = np.broadcast_to(np.asarray(target_rate, dtype=np.float64), (len(traces),))
    total = None
    for trace, target in zip(traces, rates):
        diff = ad.sub(ad.mean(trace.probs), float(target))
        term = ad.mul(diff, diff)
        total = term if total is None else ad.add(total, term)
    lengths = span_soft_lengths(traces[0].gates)
    over = ad.relu(ad.sub(lengths, float(length_cap)))
    total = ad.add(total, ad.mean(ad.mul(over, over)))
    return total


def extract_byte_boundaries(traces_or_chunksets, level: int | None = None) -> np.ndarray:
    """Byte offsets of chunk starts, composed down the hierarchy.

    Accepts the chunkset list of a hierarchy run.  ``level`` counts from
    1; default is level 1 (the finest segmentation).
    """
    chunksets = traces_or_chunksets
    if level is None:
        level = 1
    if not 1 <= level <= len(chunksets):
        raise ValueError(f"level {level} outside hierarchy of {len(chunksets)}")
    offsets = chunksets[0].starts
    for l in range(1, level):
        offsets = offsets[chunksets[l].starts]
    return offsets.copy()


def byte_to_final_chunk(chunksets, total_bytes: int) -> np.ndarray:
    """Map each byte position to the index of its final-level chunk."""
    ids = None
    length = total_bytes
    for cs in chunksets:
        sizes = cs.span_sizes(length)
        level_ids = np.repeat(np.arange(len(cs.starts)), sizes)
        ids = level_ids if ids is None else level_ids[ids]
        length = len(cs.starts)
    return ids
