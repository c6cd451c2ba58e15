"""End-to-end command-line runs on a tiny configuration."""

import json

import numpy as np
import pytest

from spreid.checkpoint import load_checkpoint
from spreid.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME, load_descriptors, main

TINY_INI = """
[run]
seed = 3

[data]
n_ids = 6
imgs_per_id = 4
n_cams = 2
height = 64
width = 24

[backbone]
stem_channels = 3,4
block_channels = 4,5,6
convs_per_stage = 1

[parser]
iters = 12
stem_channels = 3,4
block_channels = 4,5,6
aspp_channels = 4
input_scale = 1.0
batch_size = 4

[train]
phase1_iters = 12
phase2_iters = 12
phase1_height = 32
phase1_width = 16
phase2_height = 48
phase2_width = 24
batch_size = 4

[rerank]
k1 = 4
k2 = 2
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    c = ["--config", str(ini)]
    data = root / "data"
    assert main(["synth", *c, "--out", str(data)]) == 0
    manifest = str(data / "manifest.jsonl")
    assert main(["train-parser", *c, "--data", manifest, "--out", str(root / "parser.ckpt")]) == 0
    for variant in ("spreid_w_fg", "baseline"):
        assert main(["train-reid", *c, "--set", f"head.variant={variant}", "--data", manifest,
                     "--parser", str(root / "parser.ckpt"), "--out", str(root / variant)]) == 0
    for split in ("query", "gallery"):
        assert main(["extract", *c, "--data", manifest, "--split", split,
                     "--model", str(root / "spreid_w_fg" / "phase2.ckpt"),
                     "--parser", str(root / "parser.ckpt"), "--out", str(root / f"{split}.desc")]) == 0
    return root, c


def test_artifacts(run):
    root, _ = run
    assert (root / "data" / "config.ini").exists()
    metrics = json.loads((root / "parser.ckpt.metrics.json").read_text())
    assert set(metrics) >= {"overall_acc", "mean_acc", "mean_iou"}
    assert (root / "parser.ckpt.loss.csv").read_text().startswith("phase,iter,lr,loss,grad_norm_preclip")
    ck = load_checkpoint(root / "spreid_w_fg" / "phase2.ckpt")
    assert ck.provenance["input_size"] == [48, 24] and ck.architecture["grouping"]["Shoes"]
    desc, ids, cams, variant = load_descriptors(root / "query.desc")
    assert desc.shape[0] == len(ids) == len(cams) and variant == "spreid_w_fg"


def test_evaluate_and_rerank_endpoint(run):
    root, c = run
    q, g = str(root / "query.desc"), str(root / "gallery.desc")
    assert main(["evaluate", *c, "--queries", q, "--gallery", g, "--metric", "cosine",
                 "--out", str(root / "eval.json"), "--cmc-csv", str(root / "cmc.csv")]) == 0
    assert main(["rerank", *c, "--queries", q, "--gallery", g, "--lambda", "1.0",
                 "--out", str(root / "rr.json")]) == 0
    plain = json.loads((root / "eval.json").read_text())
    rr = json.loads((root / "rr.json").read_text())
    assert abs(plain["mAP"] - rr["mAP"]) <= 1e-12
    assert rr["settings"] == {"metric": "cosine", "rerank": True, "k1": 4, "k2": 2, "lambda": 1.0}
    assert (root / "cmc.csv").read_text().splitlines()[0] == "rank,cmc"


def test_combined_extract(run):
    root, c = run
    out = root / "comb.desc"
    assert main(["extract", *c, "--data", str(root / "data" / "manifest.jsonl"), "--split", "query",
                 "--model", str(root / "spreid_w_fg" / "phase2.ckpt"),
                 "--model", str(root / "baseline" / "phase2.ckpt"),
                 "--parser", str(root / "parser.ckpt"), "--out", str(out)]) == 0
    desc, *_, variant = load_descriptors(out)
    assert variant == "spreid_combined" and np.allclose(np.linalg.norm(desc, axis=1), np.sqrt(2))


def test_training_is_repeatable(run, tmp_path):
    root, c = run
    manifest = str(root / "data" / "manifest.jsonl")
    assert main(["train-reid", *c, "--set", "head.variant=baseline", "--data", manifest,
                 "--out", str(tmp_path / "again")]) == 0
    for phase in (1, 2):
        a = (root / "baseline" / f"phase{phase}.ckpt").read_bytes()
        assert (tmp_path / "again" / f"phase{phase}.ckpt").read_bytes() == a


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["synth", "--set", "data.n_ids=1", "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert not (tmp_path / "d").exists()
    assert "n_ids" in capsys.readouterr().err


def test_missing_parser_is_config_error(run, tmp_path):
    root, c = run
    assert main(["train-reid", *c, "--data", str(root / "data" / "manifest.jsonl"),
                 "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert not (tmp_path / "x").exists()


def test_runtime_failure_leaves_no_output(run, tmp_path):
    root, c = run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"SPRC\x01\x00")
    out = tmp_path / "q.desc"
    code = main(["extract", *c, "--data", str(root / "data" / "manifest.jsonl"), "--split", "query",
                 "--model", str(bad), "--out", str(out)])
    assert code == EXIT_RUNTIME
    assert list(tmp_path.iterdir()) == [bad]


def test_gradcheck_layers(capsys):
    assert main(["gradcheck", "--layers-only", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "conv2d" in out and "FAIL" not in out
    assert EXIT_CHECK == 4
