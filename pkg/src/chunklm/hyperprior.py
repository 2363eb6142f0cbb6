"""Document-level Gaussian latents.

Two independent latent vectors are inferred from the mean of the mixed
chunk embeddings, each through its own small MLP head emitting a mean and
a log standard deviation.  Sampling is reparameterized (latent = mean +
std * noise, noise recorded for replay); the KL against a standard-normal
prior is closed form.  Eval paths use the mean deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LatentHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class PriorHeads:
    head1: LatentHead
    head2: LatentHead
    latent_dim: int


@dataclass
class LatentSample:
    value: Tensor  # (d_latent,)
    noise: np.ndarray  # the standard-normal draw used, kept for replay


def init_prior_heads(
    rng: np.random.Generator,
    d_in: int,
    latent_dim: int,
    hidden: int = 64,
    dtype=np.float64,
) -> PriorHeads:
    def head():
        a1 = np.sqrt(6.0 / (d_in + hidden))
        a2 = np.sqrt(6.0 / (hidden + 2 * latent_dim))
        return LatentHead(
            w1=Tensor(rng.uniform(-a1, a1, (d_in, hidden)).astype(dtype), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w2=Tensor(rng.uniform(-a2, a2, (hidden, 2 * latent_dim)).astype(dtype), requires_grad=True),
            b2=Tensor(np.zeros(2 * latent_dim, dtype=dtype), requires_grad=True),
        )

    return PriorHeads(head1=head(), head2=head(), latent_dim=latent_dim)


def _run_head(summary: Tensor, head: LatentHead, latent_dim: int):
    row = ad.reshape(summary, (1, summary.shape[0]))
    h = ad.tanh_(ad.add(ad.matmul(row, head.w1), head.b1))
    out = ad.reshape(ad.add(ad.matmul(h, head.w2), head.b2), (2 * latent_dim,))
    mu = ad.slice_(out, slice(0, latent_dim))
    sigma = ad.exp_(ad.slice_(out, slice(latent_dim, None)))
    return mu, sigma


def infer_posterior(chunk_summary: Tensor, heads: PriorHeads):
    """(mu1, sigma1, mu2, sigma2) from the pooled chunk summary; the
    sigmas are exp(log-sigma) and therefore strictly positive."""
    mu1, sigma1 = _run_head(chunk_summary, heads.head1, heads.latent_dim)
    mu2, sigma2 = _run_head(chunk_summary, heads.head2, heads.latent_dim)
    return mu1, sigma1, mu2, sigma2


def sample_latent(mu: Tensor, sigma: Tensor, rng) -> LatentSample:
    """Reparameterized draw; deterministic given the generator state, and
    gradients flow to both mu and sigma."""
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise = gen.standard_normal(mu.shape).astype(mu.dtype)
    value = ad.add(mu, ad.mul(sigma, Tensor(noise)))
    return LatentSample(value=value, noise=noise)


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)), summed over dims.

    0.5 * sum(mu^2 + sigma^2 - 1 - 2*log(sigma)); the caller sums the
    per-latent terms when using both latents.
    """
    term = ad.sub(ad.add(ad.mul(mu, mu), ad.mul(sigma, sigma)), 1.0)
    term = ad.sub(term, ad.mul(ad.log_(sigma), 2.0))
    return ad.mul(ad.sum_(term), 0.5)
