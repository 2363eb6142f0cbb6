import json

import pytest

from chunklm.checkpoint import save_checkpoint
from chunklm.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from chunklm.config import config_from_flat, config_to_flat, load_config
from chunklm.corpus import SyntheticSpec, synthetic_corpus, write_jsonl
from chunklm.model import Model

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
}


@pytest.fixture(scope="module")
def debug_checkpoint(tmp_path_factory):
    """A checkpoint whose router opens every gate (debug segmentation)."""
    base = tmp_path_factory.mktemp("ckpt")
    cfg = config_from_flat(TINY_FLAT)
    model = Model(cfg.model, seed=0)
    for level in model.params.router:
        level.boundary.w3.data[:] = 0.0
        level.boundary.b3.data[:] = 25.0
    path = str(base / "debug.ckpt")
    save_checkpoint(model, path, config=cfg)
    return path


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    base = tmp_path_factory.mktemp("corpus")
    docs = synthetic_corpus(SyntheticSpec(n_docs=6, words_per_doc=3, seed=1))
    path = str(base / "docs.jsonl")
    write_jsonl(docs, path)
    return path


def test_no_command_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error(capsys):
    assert main(["eval-bpb", "--nope"]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_config_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model.levels": 2, "model.depth": 9}))
    with pytest.raises(ValueError, match="model.depth"):
        load_config(str(path))


def test_config_roundtrip(tmp_path):
    cfg = config_from_flat(TINY_FLAT)
    flat = config_to_flat(cfg)
    again = config_from_flat(flat)
    assert again == cfg


def test_eval_bpb_prints_json(debug_checkpoint, corpus_file, capsys):
    code = main(["eval-bpb", "--checkpoint", debug_checkpoint, "--corpus", corpus_file])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert {"bpb", "documents", "bytes"} <= set(out)
    assert out["documents"] == 6


def test_eval_bpb_missing_checkpoint_is_data_error(corpus_file, capsys):
    code = main(["eval-bpb", "--checkpoint", "/nonexistent.ckpt", "--corpus", corpus_file])
    assert code == EXIT_DATA


def test_segment_all_gates_on_lists_every_offset(debug_checkpoint, tmp_path, capsys):
    doc_path = tmp_path / "one.txt"
    doc_path.write_text("abcdef\n")
    code = main(["segment", "--checkpoint", debug_checkpoint, "--corpus", str(doc_path)])
    assert code == EXIT_OK
    row = json.loads(capsys.readouterr().out.strip())
    assert row["boundaries"] == [0, 1, 2, 3, 4, 5]


def test_eval_seg_fixture_f1_half(tmp_path, capsys):
    gold = tmp_path / "gold.jsonl"
    gold.write_text(json.dumps({"text": "abcdefghij", "boundaries": [3, 9]}) + "\n")
    pred = tmp_path / "pred.jsonl"
    pred.write_text(json.dumps({"boundaries": [3, 7]}) + "\n")
    code = main(["eval-seg", "--gold", str(gold), "--pred", str(pred)])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["f1"] == pytest.approx(0.5)
    assert out["precision"] == pytest.approx(0.5)


def test_eval_seg_requires_exactly_one_source(tmp_path, capsys):
    gold = tmp_path / "gold.jsonl"
    gold.write_text(json.dumps({"text": "ab", "boundaries": []}) + "\n")
    assert main(["eval-seg", "--gold", str(gold)]) == EXIT_USAGE


def test_eval_seg_with_checkpoint(debug_checkpoint, tmp_path, capsys):
    gold = tmp_path / "gold.jsonl"
    gold.write_text(json.dumps({"text": "abcd", "boundaries": [1, 2, 3]}) + "\n")
    code = main(["eval-seg", "--gold", str(gold), "--checkpoint", debug_checkpoint])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["f1"] == pytest.approx(1.0)  # all-gates-on predicts every offset


def test_corrupt_rate_zero_output_byte_identical(tmp_path, capsys):
    src = tmp_path / "in.txt"
    src.write_text("salam‌donya\nsecond line\n", encoding="utf-8")
    dst = tmp_path / "out.txt"
    code = main(["corrupt", "--kind", "zwnj", "--rate", "0", "--in", str(src),
                 "--out", str(dst)])
    assert code == EXIT_OK
    assert src.read_bytes() == dst.read_bytes()


def test_corrupt_rate_one_strips_zwnj(tmp_path):
    src = tmp_path / "in.txt"
    src.write_text("a‌b‌c\n", encoding="utf-8")
    dst = tmp_path / "out.txt"
    assert main(["corrupt", "--kind", "zwnj", "--rate", "1", "--in", str(src),
                 "--out", str(dst)]) == EXIT_OK
    assert "‌" not in dst.read_text(encoding="utf-8")


def test_corrupt_invalid_rate_is_usage(tmp_path, capsys):
    src = tmp_path / "in.txt"
    src.write_text("x\n")
    code = main(["corrupt", "--kind", "zwnj", "--rate", "2.0", "--in", str(src),
                 "--out", str(tmp_path / "o.txt")])
    assert code == EXIT_USAGE


def test_stats_reports_ratios_and_histogram(debug_checkpoint, corpus_file, capsys):
    code = main(["stats", "--checkpoint", debug_checkpoint, "--corpus", corpus_file])
    assert code == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert len(out["compression_ratio"]) == 2
    assert out["compression_ratio"][0] == pytest.approx(1.0)  # all gates on
    assert out["length_histogram"] == {"1": out["total_chunks"]}


def test_train_smoke_and_summary(tmp_path, corpus_file, capsys):
    cfg_path = tmp_path / "cfg.json"
    flat = dict(TINY_FLAT)
    flat.update({
        "data.corpus": [corpus_file],
        "data.train_fraction": 1.0,
        "data.val_fraction": 0.0,
        "data.test_fraction": 0.0,
        "optimizer.warmup_steps": 2,
        "curriculum.scale": 8,
        "train.total_steps": 3,
        "train.micro_batches": 1,
        "train.docs_per_micro_batch": 1,
        "train.checkpoint_interval": 0,
        "out_dir": str(tmp_path / "run"),
    })
    cfg_path.write_text(json.dumps(flat))
    code = main(["train", "--config", str(cfg_path)])
    assert code == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 3
    assert (tmp_path / "run" / "metrics.jsonl").exists()
    assert (tmp_path / "run" / "final.ckpt").exists()


def test_train_without_corpus_is_data_error(capsys, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"train.total_steps": 1}))
    assert main(["train", "--config", str(cfg_path)]) == EXIT_DATA
