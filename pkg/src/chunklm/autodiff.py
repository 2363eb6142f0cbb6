"""Minimal dense-tensor reverse-mode automatic differentiation.

Values are numpy arrays (float64 in tests, float32 allowed for training).
Executed primitives are appended to the active :class:`Tape`; ``backward``
walks the tape once, in reverse execution order, accumulating gradients
into ``Tensor.grad``.  ``gradcheck`` is the module's oracle: central finite
differences against the analytic gradients.

Tensors whose values are frozen (parameters between updates) are treated as
immutable and may be shared across threads; a single Tape is not.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


class Tensor:
    """A dense array plus an accumulated gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def const(x, dtype=None) -> Tensor:
    """Wrap a value as a non-differentiable Tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

class _Entry:
    __slots__ = ("inputs", "outputs", "backward_fn")

    def __init__(self, inputs, outputs, backward_fn):
        self.inputs = inputs
        self.outputs = outputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed primitives, replayable backward.

    Backward traversal visits each entry exactly once, in reverse
    execution order.  A single tape is single-threaded, but distinct
    threads may run distinct tapes concurrently (the active-tape stack is
    thread-local).
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)


_TAPES = threading.local()


def _stack() -> list:
    if not hasattr(_TAPES, "stack"):
        _TAPES.stack = []
    return _TAPES.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record_op(
    inputs: Sequence[Tensor],
    outputs: Sequence[Tensor],
    backward_fn: Callable[..., Sequence[np.ndarray | None]],
) -> None:
    """Append a custom op to the active tape (if recording is warranted).

    ``backward_fn`` receives one output gradient per output (zeros where
    unused) and must return one gradient or None per input.  This is the
    extension point fused ops in other modules use.
    """
    if not any(t.requires_grad for t in inputs):
        return
    tape = active_tape()
    if tape is None:
        return
    for out in outputs:
        out.requires_grad = True
    tape.entries.append(_Entry(tuple(inputs), tuple(outputs), backward_fn))


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad for every recorded tensor.

    The loss must be a scalar produced under this tape.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        out_grads = [o.grad for o in entry.outputs]
        if all(g is None for g in out_grads):
            continue
        out_grads = [
            g if g is not None else np.zeros_like(o.data)
            for g, o in zip(out_grads, entry.outputs)
        ]
        in_grads = entry.backward_fn(*out_grads)
        for t, g in zip(entry.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or expanded by broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    record_op((a, b), (out,), bwd)
    return out


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    record_op((a, b), (out,), bwd)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    record_op((a,), (out,), lambda g: (-g,))
    return out


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b)
    b = _coerce(b, a)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    record_op((a, b), (out,), bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    record_op((a, b), (out,), bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose: expected 2-D input, got shape {a.shape}")
    out = Tensor(a.data.T.copy())
    record_op((a,), (out,), lambda g: (g.T,))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape).copy())
    record_op((a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        trimmed_a = [x for i, x in enumerate(base) if i != axis % len(base)]
        trimmed_b = [x for i, x in enumerate(s) if i != axis % len(s)] if len(s) == len(base) else None
        if trimmed_b != trimmed_a:
            raise ValueError(f"concat: incompatible shapes {shapes[0]} and {s}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    record_op(tuple(tensors), (out,), bwd)
    return out


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (ints/slices); gathers by index array go through
    embedding_lookup instead."""
    out = Tensor(a.data[key].copy())

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return (full,)

    record_op((a,), (out,), bwd)
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    record_op((a,), (out,), bwd)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype, copy=True),)

    record_op((a,), (out,), bwd)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(np.asarray(a.data, dtype=a.dtype))
    out = Tensor(y)
    record_op((a,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh_(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)
    record_op((a,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    record_op((a,), (out,), lambda g: (g * (a.data > 0),))
    return out


def gelu(a: Tensor) -> Tensor:
    # tanh approximation; gradcheck targets this exact formula
    x = a.data
    u = _GELU_K * (x + _GELU_C * x ** 3)
    t = np.tanh(u)
    out = Tensor(0.5 * x * (1.0 + t))

    def bwd(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    record_op((a,), (out,), bwd)
    return out


def exp_(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    record_op((a,), (out,), lambda g: (g * y,))
    return out


def log_(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))
    record_op((a,), (out,), lambda g: (g / a.data,))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    record_op((a,), (out,), bwd)
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply the affine (gain, bias)."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layernorm: affine shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xmu = x.data - mu
    var = (xmu * xmu).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xmu * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bwd(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes) if reduce_axes else g * xhat
        dbias = g.sum(axis=reduce_axes) if reduce_axes else g.copy()
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    record_op((x, gain, bias), (out,), bwd)
    return out


def dropout(x: Tensor, rate: float, seed=None, train: bool = True) -> Tensor:
    """Seeded inverted dropout: scales by 1/(1-rate) at train time,
    identity at eval.  Same seed, same mask, bit-identical replay."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out = Tensor(x.data * mask)
    record_op((x,), (out,), lambda g: (g * mask,))
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: ids outside table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    record_op((table,), (out,), bwd)
    return out


def clip(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    record_op((a,), (out,), lambda g: (g * inside,))
    return out


def st_round(a: Tensor, threshold: float = 0.5) -> Tensor:
    """Straight-through threshold: forward emits exact {0,1}, backward is
    the identity (gradient of the continuous relaxation passes through)."""
    out = Tensor((a.data > threshold).astype(a.dtype))
    record_op((a,), (out,), lambda g: (g,))
    return out


# --------------------------------------------------------------------------
# Named dispatch
# --------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "sigmoid": sigmoid,
    "tanh": tanh_,
    "relu": relu,
    "gelu": gelu,
    "exp": exp_,
    "log": log_,
    "softmax": softmax,
    "layernorm": layernorm,
    "dropout": dropout,
    "embedding_lookup": embedding_lookup,
}


def primitive_forward(name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Run one primitive by name.  Shape mismatches raise with a diagnostic
    naming the op and the offending shapes."""
    if name not in PRIMITIVES:
        raise ValueError(f"unknown primitive {name!r}")
    fn = PRIMITIVES[name]
    if name == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    """Per-element relative errors of analytic vs central-difference grads."""

    max_rel_error: float
    tolerance: float
    rel_errors: list[np.ndarray]
    failures: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def gradcheck(
    function: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckResult:
    """Compare analytic gradients of a scalar-valued function against
    central finite differences.

    Relative error uses the floor max(|analytic|, |numeric|, 1e-3) so that
    near-zero gradients are judged on absolute error.  Report-only: the
    result flags offending elements, nothing raises.
    """
    inputs = list(inputs)
    for i, t in enumerate(inputs):
        if t.data.dtype != np.float64:
            raise ValueError(f"gradcheck: input {i} must be float64, got {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.grad = None

    with Tape() as tape:
        out = function(*inputs)
    if out.size != 1:
        raise ValueError(f"gradcheck: function must return a scalar, got {out.shape}")
    backward(tape, out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    rel_errors = []
    failures = []
    max_rel = 0.0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        errs = np.zeros(flat.size)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = function(*inputs).item()
            flat[j] = orig - step
            f_minus = function(*inputs).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[i].reshape(-1)[j])
            denom = max(abs(a), abs(numeric), 1e-3)
            rel = abs(a - numeric) / denom
            errs[j] = rel
            if rel > tolerance:
                failures.append((i, j, a, numeric, rel))
            max_rel = max(max_rel, rel)
        rel_errors.append(errs.reshape(t.shape))
        t.grad = analytic[i]

    return GradCheckResult(
        max_rel_error=max_rel,
        tolerance=tolerance,
        rel_errors=rel_errors,
        failures=failures,
    )
