import json
import math
import os

import numpy as np
import pytest

from chunklm import autodiff as ad
from chunklm.autodiff import Tensor
from chunklm.byte_frontend import encode_document
from chunklm.config import CurriculumConfig, OptimizerConfig, config_from_flat
from chunklm.corpus import SyntheticSpec, synthetic_corpus
from chunklm.model import Model
from chunklm.objective import LossWeights, NonFiniteLossError
from chunklm.errors import NumericError
from chunklm.trainer import (
    AdamState,
    adamw_step,
    clip_gradients,
    crop_document,
    curriculum_sample_length,
    curriculum_stage,
    lr_schedule,
    train,
)

CUR = CurriculumConfig()
OPT = OptimizerConfig()


# ----------------------------------------------------------------------
# Curriculum
# ----------------------------------------------------------------------

def test_warmup_stage_fixed_length():
    rng = np.random.default_rng(0)
    assert curriculum_sample_length(10_000, rng, CUR) == 256


def test_stage_transitions_exactly_at_boundaries():
    rng = np.random.default_rng(1)
    assert curriculum_stage(49_999, CUR) == "warmup"
    assert curriculum_stage(50_000, CUR) == "growth"
    assert curriculum_stage(199_999, CUR) == "growth"
    assert curriculum_stage(200_000, CUR) == "full"
    assert curriculum_sample_length(49_999, rng, CUR) == 256
    assert curriculum_sample_length(50_000, rng, CUR) in CUR.growth_lengths


def test_growth_stage_length_frequencies():
    rng = np.random.default_rng(2)
    draws = np.array([curriculum_sample_length(100_000, rng, CUR) for _ in range(100_000)])
    for length, prob in zip(CUR.growth_lengths, CUR.growth_probs):
        assert (draws == length).mean() == pytest.approx(prob, abs=0.01)


def test_full_stage_uniform_by_chi_square():
    rng = np.random.default_rng(3)
    draws = np.array([curriculum_sample_length(250_000, rng, CUR) for _ in range(100_000)])
    assert draws.min() >= 1 and draws.max() <= 4096
    counts, _ = np.histogram(draws, bins=16, range=(0.5, 4096.5))
    expected = len(draws) / 16
    chi2 = ((counts - expected) ** 2 / expected).sum()
    assert chi2 < 60.0  # df=15, far beyond the 0.999 quantile would be ~37.7


def test_scale_divides_boundaries_and_lengths():
    cfg = CurriculumConfig(scale=8)
    rng = np.random.default_rng(4)
    assert curriculum_sample_length(0, rng, cfg) == 32
    assert curriculum_stage(6_250, cfg) == "growth"
    assert curriculum_stage(6_249, cfg) == "warmup"


# ----------------------------------------------------------------------
# Learning-rate schedule
# ----------------------------------------------------------------------

def test_lr_endpoints_exact():
    total = 500_000
    assert lr_schedule(0, OPT, total) == 0.0
    assert lr_schedule(OPT.warmup_steps, OPT, total) == OPT.peak_lr
    assert lr_schedule(total, OPT, total) == pytest.approx(OPT.floor_lr, abs=1e-18)


def test_lr_continuous_at_junction_and_monotone_after_peak():
    total = 200_000
    just_before = lr_schedule(OPT.warmup_steps - 1, OPT, total)
    at = lr_schedule(OPT.warmup_steps, OPT, total)
    assert at - just_before < OPT.peak_lr / OPT.warmup_steps * 1.5
    values = [lr_schedule(s, OPT, total) for s in range(OPT.warmup_steps, total, 1000)]
    assert all(a >= b for a, b in zip(values, values[1:]))


# ----------------------------------------------------------------------
# AdamW
# ----------------------------------------------------------------------

def _one_param(value):
    t = Tensor(np.asarray([value], dtype=np.float64), requires_grad=True)
    return [("p", t)], t


def test_zero_grad_zero_decay_leaves_params():
    named, t = _one_param(1.5)
    cfg = OptimizerConfig(weight_decay=0.0)
    adamw_step(named, {"p": np.zeros(1)}, AdamState.empty(), 0, 1e-3, cfg)
    assert t.data[0] == pytest.approx(1.5)


def test_first_step_moves_by_learning_rate():
    named, t = _one_param(1.0)
    cfg = OptimizerConfig(weight_decay=0.0)
    lr = 0.01
    adamw_step(named, {"p": np.ones(1)}, AdamState.empty(), 0, lr, cfg)
    # bias-corrected first step: mhat=1, vhat=1 -> update = lr/(1+eps)
    assert 1.0 - t.data[0] == pytest.approx(lr, rel=1e-6)


def test_decoupled_decay_isolated():
    named, t = _one_param(2.0)
    cfg = OptimizerConfig(weight_decay=0.01)
    lr = 0.1
    adamw_step(named, {"p": np.zeros(1)}, AdamState.empty(), 0, lr, cfg)
    assert t.data[0] == pytest.approx(2.0 - lr * 0.01 * 2.0, abs=1e-15)


def test_non_finite_gradient_aborts_with_name():
    named, _ = _one_param(1.0)
    with pytest.raises(NumericError, match="'p'"):
        adamw_step(named, {"p": np.array([np.nan])}, AdamState.empty(), 0, 1e-3, OPT)


# ----------------------------------------------------------------------
# Clipping
# ----------------------------------------------------------------------

def test_clip_leaves_small_gradients():
    g = [np.array([0.3, 0.4])]  # norm 0.5
    out = clip_gradients(g, max_norm=1.0)
    assert np.array_equal(out[0], g[0])


def test_clip_rescales_to_max_norm():
    g = [np.array([4.0, 0.0]), np.array([0.0, 0.0, 0.0])]
    out = clip_gradients(g, max_norm=1.0)
    norm = math.sqrt(sum(float((x ** 2).sum()) for x in out))
    assert norm == pytest.approx(1.0, abs=1e-9)


def test_clip_preserves_direction():
    rng = np.random.default_rng(5)
    g = [rng.standard_normal(7) * 10]
    out = clip_gradients(g, max_norm=1.0)
    cos = float(g[0] @ out[0] / (np.linalg.norm(g[0]) * np.linalg.norm(out[0])))
    assert cos == pytest.approx(1.0, abs=1e-12)


# ----------------------------------------------------------------------
# Cropping
# ----------------------------------------------------------------------

def test_short_documents_used_whole():
    seq = encode_document("hello", gold_boundaries=[2])
    out = crop_document(seq, 100, np.random.default_rng(0))
    assert out is seq


def test_crop_respects_codepoint_boundaries():
    text = "ی" * 40  # two bytes per letter
    seq = encode_document(text)
    for seed in range(20):
        out = crop_document(seq, 13, np.random.default_rng(seed))
        assert len(out) <= 13
        out.text  # decodes cleanly


def test_crop_remaps_gold_offsets():
    seq = encode_document("abcdefghij", gold_boundaries=[2, 5, 8])
    rng = np.random.default_rng(3)
    out = crop_document(seq, 4, rng)
    assert len(out) <= 4
    if out.gold_boundaries is not None and len(out.gold_boundaries):
        assert out.gold_boundaries.min() >= 0
        assert out.gold_boundaries.max() < len(out)


# ----------------------------------------------------------------------
# Accumulation and the loop
# ----------------------------------------------------------------------

TINY_FLAT = {
    "model.levels": 2,
    "model.input_dim": 8,
    "model.router_hidden": 6,
    "model.boundary_hidden": [12, 8],
    "model.mixer_ffn_hidden": 16,
    "model.latent_dim": 4,
    "model.latent_hidden": 8,
    "model.dec_hidden": 10,
    "model.dec_value_dim": 8,
    "model.dec_type_dim": 4,
    "model.dec_pos_dim": 4,
    "model.dec_out_hidden": [12, 8],
    "model.dtype": "float64",
    "optimizer.warmup_steps": 5,
    "curriculum.scale": 8,
    "train.total_steps": 6,
    "train.micro_batches": 2,
    "train.docs_per_micro_batch": 1,
    "train.checkpoint_interval": 4,
    "train.seed": 1,
}


def small_docs():
    return synthetic_corpus(SyntheticSpec(n_docs=10, words_per_doc=3, seed=2))


def test_gradient_accumulation_equals_fused_batch():
    cfg = config_from_flat(TINY_FLAT)
    model = Model(cfg.model, seed=0)
    docs = [d for d in small_docs()][:8]
    weights = LossWeights(label_smoothing=0.0)

    def batch_grads(groups):
        model.zero_grads()
        flat = [doc for group in groups for doc in group]
        for i, doc in enumerate(flat):
            rng = np.random.default_rng(100 + i)
            with ad.Tape() as tape:
                lb = model.losses(doc, weights, mode="hard-st", train=True,
                                  rng=rng, temperature=2.0)
                scaled = ad.mul(lb.total, 1.0 / len(flat))
            ad.backward(tape, scaled)
        return {n: t.grad.copy() for n, t in model.named_parameters() if t.grad is not None}

    micro = batch_grads([docs[:2], docs[2:4], docs[4:6], docs[6:8]])
    fused = batch_grads([docs])
    assert set(micro) == set(fused)
    for name in micro:
        assert np.allclose(micro[name], fused[name], atol=1e-10), name


def test_two_same_seed_runs_are_bit_identical(tmp_path):
    cfg = config_from_flat(TINY_FLAT)
    docs = small_docs()
    r1 = train(cfg, docs, out_dir=str(tmp_path / "a"))
    r2 = train(cfg, docs, out_dir=str(tmp_path / "b"))
    log1 = open(r1.metrics_path, "rb").read()
    log2 = open(r2.metrics_path, "rb").read()
    assert log1 == log2


def test_metrics_records_have_contract_fields(tmp_path):
    cfg = config_from_flat(TINY_FLAT)
    res = train(cfg, small_docs(), out_dir=str(tmp_path / "m"))
    with open(res.metrics_path) as fh:
        records = [json.loads(line) for line in fh]
    assert len(records) == cfg.train.total_steps
    for rec in records:
        assert set(rec) == {"step", "lm", "kl", "morph", "aux", "total", "lr",
                            "tau", "mean_chunk_len"}
        assert len(rec["mean_chunk_len"]) == cfg.model.levels
    assert records[0]["tau"] == 5.0
    assert records[0]["lr"] == 0.0


def test_zero_weights_make_total_equal_lm(tmp_path):
    flat = dict(TINY_FLAT)
    flat.update({
        "loss.kl_weight": 0.0,
        "loss.morph_weight": 0.0,
        "loss.aux_weight": 0.0,
        "train.total_steps": 2,
    })
    cfg = config_from_flat(flat)
    res = train(cfg, small_docs(), out_dir=str(tmp_path / "z"))
    with open(res.metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            assert rec["total"] == pytest.approx(rec["lm"], rel=1e-12)


def test_checkpoints_written_at_interval(tmp_path):
    cfg = config_from_flat(TINY_FLAT)
    res = train(cfg, small_docs(), out_dir=str(tmp_path / "c"))
    assert os.path.exists(tmp_path / "c" / "step_4.ckpt")
    assert os.path.exists(res.final_checkpoint)


def test_nan_loss_writes_crash_checkpoint(tmp_path, monkeypatch):
    cfg = config_from_flat(TINY_FLAT)
    original = Model.losses
    calls = {"n": 0}

    def sabotage(self, *args, **kwargs):
        lb = original(self, *args, **kwargs)
        calls["n"] += 1
        if calls["n"] >= 3:
            lb.total.data = np.asarray(np.nan)
        return lb

    monkeypatch.setattr(Model, "losses", sabotage)
    with pytest.raises(NonFiniteLossError, match="crash checkpoint"):
        train(cfg, small_docs(), out_dir=str(tmp_path / "n"))
    assert os.path.exists(tmp_path / "n" / "crash.ckpt")


def test_empty_corpus_rejected(tmp_path):
    cfg = config_from_flat(TINY_FLAT)
    with pytest.raises(ValueError, match="empty"):
        train(cfg, [], out_dir=str(tmp_path / "e"))
