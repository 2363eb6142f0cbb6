"""Full model assembly: byte embedding -> router hierarchy -> context
mixer -> document latents -> mixture decoder, plus the loss breakdown
used by training and the deterministic eval paths.

Eval mode means argmax gates, latent = posterior mean, dropout off; it is
deterministic and needs no random generator.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .byte_frontend import ByteEmbeddingTable, ByteSequence, embed_bytes, init_byte_embedding
from .config import ModelConfig
from .decoder import DecoderParams, MixtureParams, decode, init_decoder, target_log_probs
from .hyperprior import PriorHeads, infer_posterior, init_prior_heads, kl_to_standard_normal, sample_latent
from .mixer import MixerParams, init_mixer, mix
from .objective import LossWeights, lm_loss, morph_loss, total_loss
from .router import (
    HierarchyOutput,
    byte_to_final_chunk,
    extract_byte_boundaries,
    init_router_level,
    router_aux_loss,
    run_hierarchy,
)


@dataclass
class ModelParams:
    frontend: ByteEmbeddingTable
    router: list
    mixer: MixerParams
    prior: PriorHeads
    decoder: DecoderParams


@dataclass
class ForwardResult:
    mixture: MixtureParams
    hierarchy: HierarchyOutput
    mixed_chunks: Tensor
    posterior: tuple  # (mu1, sigma1, mu2, sigma2)
    latent: Tensor  # concatenated latent vector fed to the decoder
    byte_chunk_ids: np.ndarray


@dataclass
class LossBreakdown:
    lm: Tensor
    kl: Tensor
    morph: Tensor | None
    aux: Tensor
    total: Tensor
    result: ForwardResult

    def component_values(self) -> dict:
        return {
            "lm": self.lm.item(),
            "kl": self.kl.item(),
            "morph": self.morph.item() if self.morph is not None else 0.0,
            "aux": self.aux.item(),
            "total": self.total.item(),
        }


def iter_tensors(obj, prefix: str = ""):
    """Walk dataclasses/lists yielding (dotted_name, Tensor) pairs in a
    stable order; used by the optimizer and the checkpoint manifest."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from iter_tensors(item, name)


class Model:
    def __init__(self, config: ModelConfig, seed: int = 0, params: ModelParams | None = None):
        self.config = config
        self.dtype = np.float64 if config.dtype == "float64" else np.float32
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> ModelParams:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dtype = self.dtype
        router = []
        d_in = cfg.input_dim
        for _ in range(cfg.levels):
            router.append(
                init_router_level(rng, d_in, cfg.router_hidden, cfg.boundary_hidden, dtype)
            )
            d_in = cfg.chunk_dim
        return ModelParams(
            frontend=init_byte_embedding(rng, cfg.input_dim, dtype),
            router=router,
            mixer=init_mixer(rng, cfg.chunk_dim, cfg.mixer_heads, cfg.mixer_ffn_hidden, dtype),
            prior=init_prior_heads(rng, cfg.chunk_dim, cfg.latent_dim, cfg.latent_hidden, dtype),
            decoder=init_decoder(
                rng,
                chunk_dim=cfg.chunk_dim,
                latent_dim=cfg.latent_dim,
                hidden=cfg.dec_hidden,
                value_dim=cfg.dec_value_dim,
                type_dim=cfg.dec_type_dim,
                pos_dim=cfg.dec_pos_dim,
                out_hidden=cfg.dec_out_hidden,
                n_components=cfg.mixture_components,
                dtype=dtype,
            ),
        )

    def named_parameters(self):
        yield from iter_tensors(self.params)

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grads(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def forward(
        self,
        seq: ByteSequence,
        mode: str = "hard-st",
        train: bool = False,
        rng=None,
        temperature: float = 1.0,
        latent_mode: str = "sample",
    ) -> ForwardResult:
        if len(seq) < 1:
            raise ValueError("forward: empty document")
        cfg = self.config
        p = self.params
        emb = embed_bytes(seq, p.frontend)
        hier = run_hierarchy(
            emb, p.router, temperature, mode, rng=rng, train=train, dropout_rate=cfg.dropout
        )
        mixed = mix(
            hier.final.embeddings,
            p.mixer,
            causal=cfg.mixer_causal,
            train=train,
            rng=rng,
            dropout_rate=cfg.dropout,
        )
        summary = ad.mean(mixed, axis=0)
        mu1, sigma1, mu2, sigma2 = infer_posterior(summary, p.prior)
        if latent_mode == "sample":
            if rng is None:
                raise ValueError("forward: latent sampling needs an rng")
            xi1 = sample_latent(mu1, sigma1, rng).value
            xi2 = sample_latent(mu2, sigma2, rng).value
        elif latent_mode == "mean":
            xi1, xi2 = mu1, mu2
        else:
            raise ValueError(f"unknown latent_mode {latent_mode!r}")
        latent = ad.concat([xi1, xi2], axis=0)
        ids = byte_to_final_chunk(hier.chunksets, len(seq))
        mixture = decode(seq, mixed, ids, latent, p.decoder, train=train, rng=rng)
        return ForwardResult(
            mixture=mixture,
            hierarchy=hier,
            mixed_chunks=mixed,
            posterior=(mu1, sigma1, mu2, sigma2),
            latent=latent,
            byte_chunk_ids=ids,
        )

    def losses(
        self,
        seq: ByteSequence,
        weights: LossWeights,
        target_rate: float = 0.5,
        length_cap: float = 16.0,
        mode: str = "hard-st",
        train: bool = True,
        rng=None,
        temperature: float = 1.0,
        latent_mode: str = "sample",
    ) -> LossBreakdown:
        res = self.forward(
            seq, mode=mode, train=train, rng=rng, temperature=temperature, latent_mode=latent_mode
        )
        mu1, sigma1, mu2, sigma2 = res.posterior
        kl = ad.add(kl_to_standard_normal(mu1, sigma1), kl_to_standard_normal(mu2, sigma2))
        lm = lm_loss(res.mixture, seq.bytes, weights.label_smoothing)
        morph = None
        if seq.gold_boundaries is not None:
            morph = morph_loss(res.hierarchy.traces[0].probs, seq.gold_boundaries, len(seq))
        aux = router_aux_loss(res.hierarchy.traces, target_rate, length_cap)
        total = total_loss(lm, kl, morph, aux, weights)
        return LossBreakdown(lm=lm, kl=kl, morph=morph, aux=aux, total=total, result=res)

    # ------------------------------------------------------------------
    # Deterministic eval paths
    # ------------------------------------------------------------------

    def eval_forward(self, seq: ByteSequence) -> ForwardResult:
        return self.forward(seq, mode="argmax", train=False, rng=None, latent_mode="mean")

    def document_log_probs(self, seq: ByteSequence) -> np.ndarray:
        """Per-byte natural-log probabilities in eval mode."""
        res = self.eval_forward(seq)
        return target_log_probs(res.mixture, seq.bytes).data.astype(np.float64)

    def segment(self, seq: ByteSequence, level: int | None = None) -> np.ndarray:
        """Predicted byte offsets of chunk starts at the given level."""
        res = self.eval_forward(seq)
        return extract_byte_boundaries(res.hierarchy.chunksets, level=level)

    def chunk_counts(self, seq: ByteSequence) -> list:
        res = self.eval_forward(seq)
        return [len(cs.starts) for cs in res.hierarchy.chunksets]
