"""Total training loss: label-smoothed byte NLL, weighted latent KL,
morphology alignment on level-1 boundary probabilities, and the router
auxiliaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import MixtureParams, mixture_log_pmf, target_log_probs
from .errors import NumericError

BCE_CLAMP = 1e-7


class NonFiniteLossError(NumericError):
    """A loss component stopped being finite; the message names it."""


@dataclass
class LossWeights:
    kl_weight: float = 0.1
    morph_weight: float = 0.1
    aux_weight: float = 0.05
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in ("kl_weight", "morph_weight", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")


def smoothed_cross_entropy(log_pmf: Tensor, targets: np.ndarray, smoothing: float) -> Tensor:
    """Mean cross-entropy against the smoothed target distribution
    (1-eps on the target byte, eps/255 spread over the other 255):
    (1-eps) * nll(target) + eps/255 * sum over non-targets of nll."""
    targets = np.asarray(targets, dtype=np.int64)
    T = log_pmf.shape[0]
    onehot = np.zeros((T, log_pmf.shape[1]), dtype=log_pmf.dtype)
    onehot[np.arange(T), targets] = 1.0
    nll_target = ad.neg(ad.sum_(ad.mul(log_pmf, Tensor(onehot)), axis=1))
    nll_all = ad.neg(ad.sum_(log_pmf, axis=1))
    off_target = ad.sub(nll_all, nll_target)
    per_pos = ad.add(
        ad.mul(nll_target, 1.0 - smoothing),
        ad.mul(off_target, smoothing / 255.0),
    )
    return ad.mean(per_pos)


def lm_loss(mixture: MixtureParams, targets: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean smoothed cross-entropy of the realized next bytes."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() > 255):
        raise ValueError("lm_loss: target bytes must lie in 0..255")
    if smoothing == 0.0:
        return ad.mean(ad.neg(target_log_probs(mixture, targets)))
    return smoothed_cross_entropy(mixture_log_pmf(mixture), targets, smoothing)


def morph_loss(boundary_probs: Tensor, gold_offsets, doc_len: int | None = None) -> Tensor:
    """Mean binary cross-entropy between level-1 boundary probabilities
    and the gold-boundary indicator.  Offset 0 is implicitly a boundary.
    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs."""
    T = boundary_probs.shape[0]
    if doc_len is not None and doc_len != T:
        raise ValueError(f"morph_loss: {T} probabilities for a {doc_len}-byte document")
    gold = np.asarray(list(gold_offsets), dtype=np.int64)
    if gold.size and (gold.min() < 0 or gold.max() >= T):
        raise ValueError(
            f"morph_loss: gold offset outside document of {T} bytes"
        )
    indicator = np.zeros(T, dtype=boundary_probs.dtype)
    indicator[0] = 1.0
    indicator[gold] = 1.0
    y = Tensor(indicator)
    one_minus_y = Tensor(1.0 - indicator)
    p = ad.clip(boundary_probs, lo=BCE_CLAMP, hi=1.0 - BCE_CLAMP)
    term = ad.add(
        ad.mul(y, ad.log_(p)),
        ad.mul(one_minus_y, ad.log_(ad.sub(1.0, p))),
    )
    return ad.neg(ad.mean(term))


def _check_finite(name: str, value: Tensor) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteLossError(f"loss component {name!r} is not finite")


def total_loss(
    lm: Tensor,
    kl: Tensor,
    morph: Tensor | None,
    aux: Tensor,
    weights: LossWeights,
) -> Tensor:
    """lm + kl_weight*kl + morph_weight*morph + aux_weight*aux.

    Documents without gold annotations pass morph=None, which contributes
    nothing.  A non-finite component aborts with its name.
    """
    _check_finite("lm", lm)
    _check_finite("kl", kl)
    _check_finite("aux", aux)
    total = ad.add(lm, ad.mul(kl, weights.kl_weight))
    if morph is not None:
        _check_finite("morph", morph)
        total = ad.add(total, ad.mul(morph, weights.morph_weight))
    return ad.add(total, ad.mul(aux, weights.aux_weight))
