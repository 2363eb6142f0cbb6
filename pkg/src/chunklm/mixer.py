"""Single-block transformer that lets final-level chunks attend to each
other: 4-head self-attention and a GeLU feed-forward, both with post-norm
residuals.  Sinusoidal encodings over the chunk index are added first so
chunk order is visible to the attention.

Attention is bidirectional by default; a causal flag is exposed for the
strictly autoregressive variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .byte_frontend import positional_encoding_matrix


@dataclass
class MixerParams:
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


def init_mixer(
    rng: np.random.Generator,
    d: int,
    heads: int = 4,
    ffn_hidden: int = 1024,
    dtype=np.float64,
) -> MixerParams:
    if d % heads != 0:
        raise ValueError(f"model width {d} not divisible by head count {heads}")
    if ffn_hidden < 1:
        raise ValueError(f"feed-forward hidden width must be >= 1, got {ffn_hidden}")

    def lin(n_in, n_out):
        a = np.sqrt(6.0 / (n_in + n_out))
        return Tensor(rng.uniform(-a, a, (n_in, n_out)).astype(dtype), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype), requires_grad=True)

    return MixerParams(
        heads=heads,
        wq=lin(d, d), bq=zeros(d),
        wk=lin(d, d), bk=zeros(d),
        wv=lin(d, d), bv=zeros(d),
        wo=lin(d, d), bo=zeros(d),
        w1=lin(d, ffn_hidden), b1=zeros(ffn_hidden),
        w2=lin(ffn_hidden, d), b2=zeros(d),
        ln1_gain=ones(d), ln1_bias=zeros(d),
        ln2_gain=ones(d), ln2_bias=zeros(d),
    )


def mix(
    chunks: Tensor,
    params: MixerParams,
    causal: bool = False,
    train: bool = False,
    rng=None,
    dropout_rate: float = 0.1,
) -> Tensor:
    """Map (K, d) chunk embeddings to (K, d) context-mixed embeddings."""
    if chunks.ndim != 2 or chunks.shape[0] < 1:
        raise ValueError(f"mix: expected non-empty (K, d) input, got {chunks.shape}")
    K, d = chunks.shape
    heads = params.heads
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)

    pos = Tensor(positional_encoding_matrix(np.arange(K), d, dtype=chunks.dtype))
    x = ad.add(chunks, pos)

    q = ad.add(ad.matmul(x, params.wq), params.bq)
    k = ad.add(ad.matmul(x, params.wk), params.bk)
    v = ad.add(ad.matmul(x, params.wv), params.bv)

    mask = None
    if causal:
        m = np.triu(np.full((K, K), -1e9, dtype=chunks.dtype), k=1)
        mask = Tensor(m)

    head_outs = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = ad.slice_(q, (slice(None), cols))
        kh = ad.slice_(k, (slice(None), cols))
        vh = ad.slice_(v, (slice(None), cols))
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
        if mask is not None:
            scores = ad.add(scores, mask)
        weights = ad.softmax(scores, axis=-1)
        weights = ad.dropout(weights, dropout_rate, seed=rng, train=train)
        head_outs.append(ad.matmul(weights, vh))

    attn = ad.add(ad.matmul(ad.concat(head_outs, axis=1), params.wo), params.bo)
    mixed = ad.layernorm(ad.add(attn, x), params.ln1_gain, params.ln1_bias)

    ff = ad.gelu(ad.add(ad.matmul(mixed, params.w1), params.b1))
    ff = ad.dropout(ff, dropout_rate, seed=rng, train=train)
    ff = ad.add(ad.matmul(ff, params.w2), params.b2)
    return ad.layernorm(ad.add(ff, mixed), params.ln2_gain, params.ln2_bias)


def count_mixer_params(params: MixerParams) -> int:
    """Exact count of trainable scalars in the mixer."""
    total = 0
    for name in (
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "w1", "b1", "w2", "b2",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
    ):
        total += getattr(params, name).size
    return total
