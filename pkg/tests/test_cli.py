import json
import subprocess
import sys
from pathlib import Path

import pytest

from vqlattice.cli import main
from vqlattice.lattice import load as load_lattice, validate


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root: Path, variant="vq", seed=5):
    data, model, dec = root / "data", root / "model", root / "decode"
    assert run("gen-data", "--out", data, "--train-count", 24, "--dev-count", 4, "--test-count", 4, "--seed", seed) == 0
    assert run("train", "--data", data / "train.txt", "--variant", variant, "--out", model,
               "--epochs", 1, "--batch-size", 4, "--seed", seed) == 0
    ckpt = model / "model.ckpt"
    assert run("decode", "--checkpoint", ckpt, "--data", data / "test.txt", "--out", dec, "--beam", 3, "--seed", seed) == 0
    assert run("eval", "--checkpoint", ckpt, "--data", data / "test.txt", "--out", root / "eval.txt",
               "--beams", "1,2", "--seed", seed) == 0
    assert run("rescore", "--checkpoint", ckpt, "--dev", data / "dev.txt", "--test", data / "test.txt",
               "--lm-data", data / "train.txt", "--out", root / "rescore", "--beam", 3, "--seed", seed) == 0
    return root


ARTIFACTS = [
    "data/train.txt", "data/dev.txt", "data/test.txt", "data/gen_data_report.txt",
    "model/model.ckpt", "model/loss_curve.tsv", "model/train_report.txt",
    "decode/transcripts.txt", "decode/decode_report.txt", "eval.txt",
    "rescore/lm.txt", "rescore/rescored.txt", "rescore/rescore_report.txt",
]


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("a")), pipeline(tmp_path_factory.mktemp("b"))


def test_pipeline_emits_every_artifact(two_runs):
    root, _ = two_runs
    for name in ARTIFACTS:
        assert (root / name).is_file(), name
    lats = sorted((root / "decode" / "lattices").glob("*.lat"))
    assert len(lats) == 4
    symbols = (root / "data" / "test.txt").read_text().splitlines()[2].split()[1:]
    assert all(validate(load_lattice(p, symbols)).ok for p in lats)
    report = (root / "eval.txt").read_text().splitlines()
    assert report[0].startswith("# vqlattice ") and report[0].endswith(" eval")
    assert report[1].startswith("# config_hash ") and report[2] == "# seed 5"
    assert report[3].startswith("# checkpoint_sha256 ")
    assert "beam\twer\toracle_wer\tdensity\tinvalid_lattices" in report
    rescore = (root / "rescore" / "rescore_report.txt").read_text()
    assert "best_lambda" in rescore and "test_wer_after" in rescore


def test_identical_seeds_give_identical_bytes(two_runs):
    a, b = two_runs
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for p in sorted((a / "decode" / "lattices").glob("*.lat")):
        assert p.read_bytes() == (b / "decode" / "lattices" / p.name).read_bytes()


def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("train", "--variant", "nope", "--data", "x", "--out", tmp_path) == 1
    assert run("gen-data") == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"no_such_flag": 1}))
    assert run("gen-data", "--out", tmp_path, "--config", cfg) == 1
    assert run("gen-data", "--out", tmp_path, "--config", tmp_path / "missing.json") == 1
    assert "error:" in capsys.readouterr().err


def test_runtime_errors_exit_2(two_runs, tmp_path):
    root, _ = two_runs
    assert run("decode", "--checkpoint", tmp_path / "none.ckpt", "--data", root / "data/test.txt", "--out", tmp_path) == 2
    assert run("train", "--data", tmp_path / "none.txt", "--out", tmp_path) == 2
    bad = tmp_path / "bad.txt"
    bad.write_text("garbage\n")
    assert run("decode", "--checkpoint", root / "model/model.ckpt", "--data", bad, "--out", tmp_path) == 2


def test_incompatible_strategy_is_a_usage_error(tmp_path, two_runs):
    root, _ = two_runs
    data = tmp_path / "d"
    run("gen-data", "--out", data, "--train-count", 4, "--dev-count", 2, "--test-count", 2)
    run("train", "--data", data / "train.txt", "--variant", "baseline", "--out", tmp_path / "m", "--epochs", 1)
    code = run("decode", "--checkpoint", tmp_path / "m/model.ckpt", "--data", data / "test.txt",
               "--out", tmp_path / "o", "--strategy", "vq_state")
    assert code == 1


def test_config_file_overrides_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train-count": 3, "dev_count": 2, "test_count": 2, "seed": 9}))
    assert run("gen-data", "--out", tmp_path / "d", "--train-count", 50, "--config", cfg) == 0
    text = (tmp_path / "d" / "gen_data_report.txt").read_text()
    assert "# seed 9" in text and "train\t3\t" in text


def test_console_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vqlattice.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
