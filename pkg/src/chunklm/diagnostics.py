"""Finite-difference verification suites runnable from the CLI.

The per-primitive suite checks every named primitive on random shapes.
The end-to-end suite builds a complete tiny model, runs the total loss in
soft routing mode (the differentiable relaxation the straight-through
estimator passes gradients through), and compares the analytic gradient
of every trainable element against central differences.  Embedding-table
rows the probe document never touches provably receive zero gradient, so
they are asserted zero instead of being finite-differenced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .byte_frontend import encode_document
from .config import ModelConfig
from .decoder import causal_byte_classes
from .model import Model
from .objective import LossWeights

# The composed loss crosses ReLU kinks when perturbed at the 1e-5 scale;
# 1e-6 sits below them while float64 keeps the FD noise near 1e-9.
E2E_STEP = 1e-6
E2E_TOLERANCE = 1e-3
PRIMITIVE_TOLERANCE = 1e-4


@dataclass
class CheckLine:
    name: str
    max_rel_error: float
    checked: int
    ok: bool


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def primitive_checks(seed: int = 0, shapes_per_op: int = 5) -> list:
    """Gradcheck every primitive on random small shapes."""
    rng = np.random.default_rng(seed)
    lines = []

    def run(name, make):
        worst = 0.0
        checked = 0
        ok = True
        for _ in range(shapes_per_op):
            fn, inputs = make()
            res = ad.gradcheck(fn, inputs, tolerance=PRIMITIVE_TOLERANCE)
            worst = max(worst, res.max_rel_error)
            checked += sum(t.size for t in inputs)
            ok = ok and res.ok
        lines.append(CheckLine(name, worst, checked, ok))

    run("matmul", lambda: _matmul_case(rng))
    run("add", lambda: _binary_case(rng, ad.add))
    run("mul", lambda: _binary_case(rng, ad.mul))
    run("concat", lambda: _concat_case(rng))
    run("slice", lambda: _slice_case(rng))
    run("sum", lambda: _reduce_case(rng, ad.sum_))
    run("mean", lambda: _reduce_case(rng, ad.mean))
    for name, op in (
        ("sigmoid", ad.sigmoid),
        ("tanh", ad.tanh_),
        ("relu", ad.relu),
        ("gelu", ad.gelu),
        ("exp", ad.exp_),
    ):
        run(name, lambda op=op: _elementwise_case(rng, op))
    run("log", lambda: _log_case(rng))
    run("softmax", lambda: _softmax_case(rng))
    run("layernorm", lambda: _layernorm_case(rng))
    run("dropout", lambda: _dropout_case(rng))
    run("embedding_lookup", lambda: _embedding_case(rng))
    return lines


def _matmul_case(rng):
    m, k, n = (int(rng.integers(1, 5)) for _ in range(3))
    a, b = _rand(rng, m, k), _rand(rng, k, n)
    return (lambda a, b: ad.sum_(ad.matmul(a, b))), [a, b]


def _binary_case(rng, op):
    shape = tuple(int(rng.integers(1, 4)) for _ in range(2))
    a, b = _rand(rng, *shape), _rand(rng, *shape)
    w = Tensor(rng.standard_normal(shape))
    return (lambda a, b: ad.sum_(ad.mul(op(a, b), w))), [a, b]


def _concat_case(rng):
    cols = int(rng.integers(1, 4))
    a = _rand(rng, int(rng.integers(1, 4)), cols)
    b = _rand(rng, int(rng.integers(1, 4)), cols)
    return (lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=0),
                                        ad.concat([a, b], axis=0)))), [a, b]


def _slice_case(rng):
    a = _rand(rng, 4, 5)
    key = (slice(1, 3), slice(0, 4))
    return (lambda a: ad.sum_(ad.mul(ad.slice_(a, key), ad.slice_(a, key)))), [a]


def _reduce_case(rng, op):
    a = _rand(rng, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    axis = int(rng.integers(0, 2))
    w = Tensor(rng.standard_normal(a.shape[1 - axis]))
    return (lambda a: ad.sum_(ad.mul(op(a, axis=axis), w))), [a]


def _elementwise_case(rng, op):
    a = _rand(rng, int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    w = Tensor(rng.standard_normal(a.shape))
    return (lambda a: ad.sum_(ad.mul(op(a), w))), [a]


def _log_case(rng):
    a = Tensor(rng.uniform(0.2, 3.0, (3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 4)))
    return (lambda a: ad.sum_(ad.mul(ad.log_(a), w))), [a]


def _softmax_case(rng):
    a = _rand(rng, int(rng.integers(1, 4)), int(rng.integers(2, 6)))
    w = Tensor(rng.standard_normal(a.shape))
    return (lambda a: ad.sum_(ad.mul(ad.softmax(a, axis=-1), w))), [a]


def _layernorm_case(rng):
    d = int(rng.integers(2, 6))
    x = _rand(rng, int(rng.integers(1, 4)), d)
    g = _rand(rng, d)
    b = _rand(rng, d)
    w = Tensor(rng.standard_normal((x.shape[0], d)))
    return (lambda x, g, b: ad.sum_(ad.mul(ad.layernorm(x, g, b), w))), [x, g, b]


def _dropout_case(rng):
    a = _rand(rng, 3, 4)
    w = Tensor(rng.standard_normal((3, 4)))
    seed = int(rng.integers(0, 2 ** 31))
    return (lambda a: ad.sum_(ad.mul(ad.dropout(a, 0.4, seed=seed, train=True), w))), [a]


def _embedding_case(rng):
    table = _rand(rng, 6, 3)
    ids = rng.integers(0, 6, size=7)
    w = Tensor(rng.standard_normal((7, 3)))
    return (lambda t: ad.sum_(ad.mul(ad.embedding_lookup(t, ids), w))), [table]


# --------------------------------------------------------------------------
# End-to-end check on a complete tiny model
# --------------------------------------------------------------------------

TINY_CONFIG = ModelConfig(
    levels=2,
    input_dim=4,
    router_hidden=4,
    boundary_hidden=(8, 6),
    dropout=0.1,
    mixer_heads=4,
    mixer_ffn_hidden=8,
    latent_dim=3,
    latent_hidden=6,
    dec_hidden=8,
    dec_value_dim=4,
    dec_type_dim=4,
    dec_pos_dim=4,
    dec_out_hidden=(8, 6),
    dtype="float64",
)


@dataclass
class EndToEndReport:
    max_rel_error: float
    elements_checked: int
    zero_rows_verified: int
    failures: list
    ok: bool


def end_to_end_gradcheck(
    seed: int = 1,
    doc: str = "mi‌tar bek",  # 12 bytes: 2 + 3 (ZWNJ) + 3 + 1 + 3
    step: float = E2E_STEP,
    tolerance: float = E2E_TOLERANCE,
) -> EndToEndReport:
    """Finite-difference the total loss through the whole tiny model.

    Runs in soft routing mode with pinned noise so the loss is a smooth
    function of the parameters; straight-through estimators are checked
    separately (their hard forward is intentionally non-differentiable).
    The default probe seed keeps every ReLU preactivation clear of its
    kink at the FD step scale.
    """
    model = Model(TINY_CONFIG, seed=seed)
    seq = encode_document(doc, gold_boundaries=[5, 9])
    weights = LossWeights(kl_weight=0.2, morph_weight=0.5, aux_weight=0.1,
                          label_smoothing=0.1)
    noise_seed = seed + 1

    def loss_fn() -> ad.Tensor:
        rng = np.random.default_rng(noise_seed)
        lb = model.losses(
            seq,
            weights,
            target_rate=0.5,
            length_cap=4.0,
            mode="soft",
            train=True,
            rng=rng,
            temperature=1.5,
            latent_mode="sample",
        )
        return lb.total

    params = list(model.named_parameters())
    for _, t in params:
        t.grad = None
    with ad.Tape() as tape:
        out = loss_fn()
    ad.backward(tape, out)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params}

    # rows of the embedding tables that the probe document can touch
    used_rows = {
        "frontend.byte_embed": set(int(b) for b in seq.bytes),
        "decoder.value_embed": set(int(b) for b in seq.bytes[:-1]),
        "decoder.type_embed": set(int(c) for c in causal_byte_classes(seq)[:-1]),
    }

    failures = []
    max_rel = 0.0
    checked = 0
    zero_rows = 0
    for name, tensor in params:
        flat = tensor.data.reshape(-1)
        if name in used_rows:
            rows = used_rows[name]
            n_cols = tensor.shape[1]
            idx = [r * n_cols + c for r in sorted(rows) for c in range(n_cols)]
            grad = analytic[name]
            for r in range(tensor.shape[0]):
                if r not in rows and np.any(grad[r] != 0.0):
                    failures.append((name, r, float(np.abs(grad[r]).max()), 0.0, np.inf))
                elif r not in rows:
                    zero_rows += 1
        else:
            idx = range(flat.size)
        a_flat = analytic[name].reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = loss_fn().item()
            flat[j] = orig - step
            f_minus = loss_fn().item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
            checked += 1
            max_rel = max(max_rel, rel)
            if rel > tolerance:
                failures.append((name, j, a, numeric, rel))

    return EndToEndReport(
        max_rel_error=max_rel,
        elements_checked=checked,
        zero_rows_verified=zero_rows,
        failures=failures,
        ok=not failures,
    )
