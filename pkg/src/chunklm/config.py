"""Run configuration: nested dataclasses with a flat JSON surface.

Config files are flat JSON objects whose keys are dotted paths
("model.levels", "optimizer.peak_lr", ...).  Unknown keys are errors so a
typo in a loss weight cannot silently invalidate an experiment.  Every
field has a default; the defaults follow the reference training recipe
(3 router levels, AdamW 2e-4 with betas 0.9/0.98, 50k warmup, curriculum
stages at 50k/200k steps, label smoothing 0.1, morphology weight 0.1,
chunk-length penalty 0.05).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class ModelConfig:
    levels: int = 3
    input_dim: int = 64  # router-side byte embedding width
    router_hidden: int = 64  # per GRU direction
    boundary_hidden: tuple = (512, 256)
    dropout: float = 0.1
    mixer_heads: int = 4
    mixer_ffn_hidden: int = 1024
    mixer_causal: bool = False
    latent_dim: int = 32
    latent_hidden: int = 64
    dec_hidden: int = 128
    dec_value_dim: int = 256
    dec_type_dim: int = 32
    dec_pos_dim: int = 128
    dec_out_hidden: tuple = (512, 256)
    mixture_components: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("model.levels must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"model.dtype must be float32 or float64, got {self.dtype!r}")
        self.boundary_hidden = tuple(self.boundary_hidden)
        self.dec_out_hidden = tuple(self.dec_out_hidden)

    @property
    def chunk_dim(self) -> int:
        return 2 * self.router_hidden


@dataclass
class LossConfig:
    kl_weight: float = 0.1
    kl_warmup_steps: int = 10000  # linear anneal of the KL weight from 0
    morph_weight: float = 0.1
    aux_weight: float = 0.05
    label_smoothing: float = 0.1
    target_rate: float = 0.5  # per-level boundary-rate target
    length_cap: float = 16.0  # level-1 chunk length penalty threshold

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("loss.label_smoothing must lie in [0, 1)")
        for name in ("kl_weight", "morph_weight", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be nonnegative")


@dataclass
class OptimizerConfig:
    peak_lr: float = 2.0e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    warmup_steps: int = 50000
    floor_lr: float = 1.0e-6
    clip_norm: float = 1.0
    eps: float = 1.0e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("optimizer betas must lie in (0, 1)")
        if self.floor_lr > self.peak_lr:
            raise ValueError("optimizer.floor_lr must not exceed peak_lr")


@dataclass
class CurriculumConfig:
    warmup_end: int = 50000
    growth_end: int = 200000
    warmup_len: int = 256
    growth_lengths: tuple = (256, 512, 1024, 2048)
    growth_probs: tuple = (0.4, 0.3, 0.2, 0.1)
    full_cap: int = 4096
    scale: int = 1  # divides every boundary and length for desk-scale runs

    def __post_init__(self):
        self.growth_lengths = tuple(self.growth_lengths)
        self.growth_probs = tuple(self.growth_probs)
        if len(self.growth_lengths) != len(self.growth_probs):
            raise ValueError("curriculum growth lengths/probs differ in length")
        if abs(sum(self.growth_probs) - 1.0) > 1e-9:
            raise ValueError("curriculum.growth_probs must sum to 1")
        if self.warmup_end > self.growth_end:
            raise ValueError("curriculum.warmup_end must not exceed growth_end")
        if self.scale < 1:
            raise ValueError("curriculum.scale must be >= 1")


@dataclass
class TrainSettings:
    total_steps: int = 1000
    micro_batches: int = 4
    docs_per_micro_batch: int = 2
    checkpoint_interval: int = 500
    seed: int = 0


@dataclass
class DataConfig:
    corpus: tuple = ()  # one or more text/JSONL paths
    train_fraction: float = 0.90
    val_fraction: float = 0.05
    test_fraction: float = 0.05
    split_seed: int = 0

    def __post_init__(self):
        self.corpus = tuple(self.corpus)
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValueError("data split fractions must sum to 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"


_SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "optimizer": OptimizerConfig,
    "curriculum": CurriculumConfig,
    "train": TrainSettings,
    "data": DataConfig,
}


def known_keys() -> set[str]:
    keys = {"out_dir"}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            keys.add(f"{section}.{f.name}")
    return keys


def config_from_flat(flat: dict) -> RunConfig:
    """Build a RunConfig from a flat dotted-key mapping; unknown keys raise."""
    valid = known_keys()
    unknown = sorted(set(flat) - valid)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    sections: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}
    for key, value in flat.items():
        if "." in key:
            section, name = key.split(".", 1)
            sections[section][name] = value
        else:
            top[key] = value
    kwargs = {name: cls(**sections[name]) for name, cls in _SECTIONS.items()}
    kwargs.update(top)
    return RunConfig(**kwargs)


def config_to_flat(config: RunConfig) -> dict:
    flat: dict = {"out_dir": config.out_dir}
    for section, cls in _SECTIONS.items():
        obj = getattr(config, section)
        for f in dataclasses.fields(cls):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section}.{f.name}"] = value
    return flat


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        flat = json.load(fh)
    if not isinstance(flat, dict):
        raise ValueError("config file must contain a JSON object")
    return config_from_flat(flat)


def save_config(config: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_flat(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
