"""Byte decoder: LSTM stack, highway fusion with chunk context, and a
5-component discretized-logistic mixture over the next byte.

At step t the LSTM consumes features of byte t-1 (a learned start vector
at t=0), so the emitted mixture for position t depends only on earlier
bytes, the chunk embedding covering t, and the document latent.  Mixture
locations live directly on the integer byte scale 0..255; bins are unit
width with open edge bins, so the discretized PMF sums to one exactly.
Log-scales are clamped at -7 to keep off-bin log-probabilities finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .byte_frontend import (
    CONTROL,
    ByteSequence,
    _category_class,
    positional_encoding_matrix,
)
from .recurrent import lstm_layer, init_lstm

LOG_SCALE_MIN = -7.0
PROB_FLOOR = 1e-12


@dataclass
class LstmParams:
    wx: Tensor
    wh: Tensor
    b: Tensor


@dataclass
class HighwayParams:
    gate_w: Tensor
    gate_b: Tensor
    transform_w: Tensor
    transform_b: Tensor
    project_w: Tensor
    project_b: Tensor


@dataclass
class DecoderParams:
    value_embed: Tensor  # (256, v)
    type_embed: Tensor  # (4, ty)
    start_vec: Tensor  # (v + ty,), stands in for the missing previous byte
    in_w: Tensor
    in_b: Tensor
    lat_in_w: Tensor
    lat_in_b: Tensor
    lat_state_w: Tensor
    lat_state_b: Tensor
    lstm: list  # 3 LstmParams, adjacent additive residuals
    highway: HighwayParams
    out_w1: Tensor
    out_b1: Tensor
    out_w2: Tensor
    out_b2: Tensor
    out_w3: Tensor
    out_b3: Tensor
    pos_dim: int
    n_components: int


@dataclass
class MixtureParams:
    """Per-position mixture natural parameters, laid out as
    (locations | log-scales | weight logits), n_components each."""

    raw: Tensor  # (T, 3 * n_components)
    n_components: int

    def __post_init__(self):
        if self.raw.shape[-1] != 3 * self.n_components:
            raise ValueError(
                f"mixture head must emit {3 * self.n_components} scalars per "
                f"position, got {self.raw.shape[-1]}"
            )

    def locations(self) -> Tensor:
        return ad.slice_(self.raw, (slice(None), slice(0, self.n_components)))

    def log_scales(self) -> Tensor:
        k = self.n_components
        return ad.slice_(self.raw, (slice(None), slice(k, 2 * k)))

    def weight_logits(self) -> Tensor:
        k = self.n_components
        return ad.slice_(self.raw, (slice(None), slice(2 * k, 3 * k)))


def init_decoder(
    rng: np.random.Generator,
    chunk_dim: int,
    latent_dim: int,
    hidden: int = 128,
    value_dim: int = 256,
    type_dim: int = 32,
    pos_dim: int = 128,
    out_hidden: tuple[int, int] = (512, 256),
    n_components: int = 5,
    dtype=np.float64,
) -> DecoderParams:
    def lin(n_in, n_out, gain=1.0):
        a = gain * np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-a, a, (n_in, n_out)).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    h1, h2 = out_hidden
    feat_dim = value_dim + type_dim

    # Final bias puts components across the byte range with wide scales so
    # the initial PMF is close to uniform (about 8 bits per byte).
    out_b3 = np.zeros(3 * n_components, dtype=dtype)
    out_b3[:n_components] = np.linspace(16.0, 240.0, n_components)
    out_b3[n_components : 2 * n_components] = np.log(64.0)

    return DecoderParams(
        value_embed=Tensor((rng.standard_normal((256, value_dim)) * 0.02).astype(dtype), requires_grad=True),
        type_embed=Tensor((rng.standard_normal((4, type_dim)) * 0.02).astype(dtype), requires_grad=True),
        start_vec=Tensor((rng.standard_normal(feat_dim) * 0.02).astype(dtype), requires_grad=True),
        in_w=lin(feat_dim + pos_dim, hidden),
        in_b=zeros(hidden),
        lat_in_w=lin(2 * latent_dim, hidden),
        lat_in_b=zeros(hidden),
        lat_state_w=lin(2 * latent_dim, hidden),
        lat_state_b=zeros(hidden),
        lstm=[LstmParams(**init_lstm(rng, hidden, hidden, dtype)) for _ in range(3)],
        highway=HighwayParams(
            gate_w=lin(hidden, hidden),
            gate_b=zeros(hidden),
            transform_w=lin(hidden, hidden),
            transform_b=zeros(hidden),
            project_w=lin(chunk_dim, hidden),
            project_b=zeros(hidden),
        ),
        out_w1=lin(hidden, h1),
        out_b1=zeros(h1),
        out_w2=lin(h1, h2),
        out_b2=zeros(h2),
        out_w3=lin(h2, 3 * n_components, gain=0.1),
        out_b3=Tensor(out_b3, requires_grad=True),
        pos_dim=pos_dim,
        n_components=n_components,
    )


def causal_byte_classes(seq: ByteSequence) -> np.ndarray:
    """Byte classes usable as decoder inputs without looking ahead: the
    category of a codepoint is attributed to its final byte only, so the
    class at position u is a function of bytes <= u."""
    raw = seq.bytes.tobytes()
    out = np.full(len(raw), CONTROL, dtype=np.int64)
    pos = 0
    while pos < len(raw):
        lead = raw[pos]
        if lead < 0x80:
            width = 1
        elif lead >> 5 == 0b110:
            width = 2
        elif lead >> 4 == 0b1110:
            width = 3
        elif lead >> 3 == 0b11110:
            width = 4
        else:
            width = 1
        chunk = raw[pos : pos + width]
        try:
            ch = chunk.decode("utf-8")
            out[pos + width - 1] = _category_class(ch)
        except UnicodeDecodeError:
            width = 1
        pos += width
    return out


def highway_fuse(lstm_out: Tensor, chunk_embed: Tensor, gate_params: HighwayParams) -> Tensor:
    """g * transform(lstm_out) + (1 - g) * project(chunk_embed), with the
    gate a learned sigmoid of the LSTM output."""
    g = ad.sigmoid(ad.add(ad.matmul(lstm_out, gate_params.gate_w), gate_params.gate_b))
    tr = ad.add(ad.matmul(lstm_out, gate_params.transform_w), gate_params.transform_b)
    pr = ad.add(ad.matmul(chunk_embed, gate_params.project_w), gate_params.project_b)
    one_minus = ad.sub(1.0, g)
    return ad.add(ad.mul(g, tr), ad.mul(one_minus, pr))


def decode(
    seq: ByteSequence,
    mixed_chunks: Tensor,
    byte_chunk_ids: np.ndarray,
    latent: Tensor,
    params: DecoderParams,
    train: bool = False,
    rng=None,
) -> MixtureParams:
    """Mixture parameters for every byte position of one document.

    ``byte_chunk_ids`` maps each position to the final-level chunk that
    contains it and must cover the whole document.
    """
    T = len(seq)
    ids = np.asarray(byte_chunk_ids)
    if ids.shape != (T,):
        raise ValueError(f"decode: chunk map covers {ids.shape[0] if ids.ndim else 0} "
                         f"positions for a {T}-byte document")
    if ids.min() < 0 or ids.max() >= mixed_chunks.shape[0]:
        raise ValueError("decode: chunk map references chunks outside the chunk set")

    dtype = mixed_chunks.dtype
    feat_dim = params.start_vec.shape[0]
    start_row = ad.reshape(params.start_vec, (1, feat_dim))
    if T > 1:
        prev_bytes = seq.bytes[:-1].astype(np.int64)
        prev_classes = causal_byte_classes(seq)[:-1]
        ve = ad.embedding_lookup(params.value_embed, prev_bytes)
        te = ad.embedding_lookup(params.type_embed, prev_classes)
        feats = ad.concat([start_row, ad.concat([ve, te], axis=1)], axis=0)
    else:
        feats = start_row
    pos = Tensor(positional_encoding_matrix(np.arange(T), params.pos_dim, dtype=dtype))
    feats = ad.concat([feats, pos], axis=1)

    x = ad.add(ad.matmul(feats, params.in_w), params.in_b)
    lat_row = ad.reshape(latent, (1, latent.shape[0]))
    x = ad.add(x, ad.add(ad.matmul(lat_row, params.lat_in_w), params.lat_in_b))
    h0 = ad.reshape(
        ad.add(ad.matmul(lat_row, params.lat_state_w), params.lat_state_b),
        (params.in_b.shape[0],),
    )

    cur = x
    for layer in params.lstm:
        out = lstm_layer(cur, layer.wx, layer.wh, layer.b, h0=h0)
        cur = ad.add(out, cur)

    chunk_rows = ad.embedding_lookup(mixed_chunks, ids)
    fused = highway_fuse(cur, chunk_rows, params.highway)

    h = ad.relu(ad.add(ad.matmul(fused, params.out_w1), params.out_b1))
    h = ad.relu(ad.add(ad.matmul(h, params.out_w2), params.out_b2))
    raw = ad.add(ad.matmul(h, params.out_w3), params.out_b3)
    return MixtureParams(raw=raw, n_components=params.n_components)


def mixture_log_pmf(mixture: MixtureParams, byte_values=None) -> Tensor:
    """Log-probability table of shape (T, B) over the given byte values
    (all 256 by default).

    Per component: sigmoid((b + 0.5 - loc)/s) - sigmoid((b - 0.5 - loc)/s),
    with bin 0 integrating from -inf and bin 255 to +inf.  The summed PMF
    is floored at 1e-12 before the log so extreme parameters stay finite.
    """
    if byte_values is None:
        byte_values = np.arange(256)
    values = np.asarray(byte_values, dtype=np.float64)
    if values.size and (values.min() < 0 or values.max() > 255):
        raise ValueError("mixture_log_pmf: byte values must lie in 0..255")
    dtype = mixture.raw.dtype
    T = mixture.raw.shape[0]
    K = mixture.n_components
    B = values.size

    loc = ad.reshape(mixture.locations(), (T, 1, K))
    log_s = ad.clip(mixture.log_scales(), lo=LOG_SCALE_MIN)
    inv_s = ad.exp_(ad.neg(ad.reshape(log_s, (T, 1, K))))
    weights = ad.reshape(ad.softmax(mixture.weight_logits(), axis=-1), (T, 1, K))

    upper = Tensor((values + 0.5).astype(dtype).reshape(1, B, 1))
    lower = Tensor((values - 0.5).astype(dtype).reshape(1, B, 1))
    cdf_hi = ad.sigmoid(ad.mul(ad.sub(upper, loc), inv_s))
    cdf_lo = ad.sigmoid(ad.mul(ad.sub(lower, loc), inv_s))

    not_first = Tensor((values != 0).astype(dtype).reshape(1, B, 1))
    is_last = Tensor((values == 255).astype(dtype).reshape(1, B, 1))
    not_last = Tensor((values != 255).astype(dtype).reshape(1, B, 1))
    cdf_hi = ad.add(ad.mul(cdf_hi, not_last), is_last)
    cdf_lo = ad.mul(cdf_lo, not_first)

    pmf = ad.sum_(ad.mul(weights, ad.sub(cdf_hi, cdf_lo)), axis=2)
    return ad.log_(ad.clip(pmf, lo=PROB_FLOOR))


def mixture_log_prob(params_row, target_byte: int) -> float:
    """Log-probability of one byte under one position's mixture."""
    if not 0 <= int(target_byte) <= 255:
        raise ValueError(f"target byte {target_byte} outside 0..255")
    row = params_row.raw if isinstance(params_row, MixtureParams) else params_row
    if isinstance(row, Tensor):
        arr = row.data
    else:
        arr = np.asarray(row, dtype=np.float64)
    arr = arr.reshape(1, -1)
    mixture = MixtureParams(raw=Tensor(arr), n_components=arr.shape[1] // 3)
    out = mixture_log_pmf(mixture, byte_values=np.array([int(target_byte)]))
    return out.item()


def target_log_probs(mixture: MixtureParams, targets: np.ndarray) -> Tensor:
    """Per-position log-probability of the realized next bytes, (T,)."""
    targets = np.asarray(targets, dtype=np.int64)
    T = mixture.raw.shape[0]
    if targets.shape != (T,):
        raise ValueError(f"targets shape {targets.shape} does not match {T} positions")
    dtype = mixture.raw.dtype
    K = mixture.n_components

    loc = mixture.locations()
    log_s = ad.clip(mixture.log_scales(), lo=LOG_SCALE_MIN)
    inv_s = ad.exp_(ad.neg(log_s))
    weights = ad.softmax(mixture.weight_logits(), axis=-1)

    vals = targets.astype(np.float64)
    upper = Tensor(((vals + 0.5)[:, None]).astype(dtype))
    lower = Tensor(((vals - 0.5)[:, None]).astype(dtype))
    cdf_hi = ad.sigmoid(ad.mul(ad.sub(upper, loc), inv_s))
    cdf_lo = ad.sigmoid(ad.mul(ad.sub(lower, loc), inv_s))

    not_first = Tensor(((vals != 0).astype(dtype))[:, None])
    is_last = Tensor(((vals == 255).astype(dtype))[:, None])
    not_last = Tensor(((vals != 255).astype(dtype))[:, None])
    cdf_hi = ad.add(ad.mul(cdf_hi, not_last), is_last)
    cdf_lo = ad.mul(cdf_lo, not_first)

    pmf = ad.sum_(ad.mul(weights, ad.sub(cdf_hi, cdf_lo)), axis=1)
    return ad.log_(ad.clip(pmf, lo=PROB_FLOOR))
