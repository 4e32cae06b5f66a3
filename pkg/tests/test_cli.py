import json
import subprocess
import sys

import pytest

from ifmotion import __version__
from ifmotion.cli import main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "evaluate" in out


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and __version__ in out and "IFMSVM1" in out


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and "usage" in err


def test_no_subcommand(capsys):
    assert run(capsys)[0] == 1


def test_evaluate_missing_file(capsys, tmp_path):
    missing = tmp_path / "nothere.jsonl"
    code, _, err = run(capsys, "evaluate", "--dataset", missing, "--out", tmp_path / "r")
    assert code == 2 and str(missing) in err


def test_preprocess_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "preprocess", "--in", tmp_path / "x.jsonl", "--out", tmp_path / "y.jsonl")
    assert code == 2 and "x.jsonl" in err


def test_train_needs_one_input(capsys, tmp_path):
    assert run(capsys, "train", "--out", tmp_path / "m.bin")[0] == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ifmotion", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "synth" in res.stdout


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.toml").write_text("n_subjects = 3\ntrials_per_intention = 2\nrejection_rate = 0.0\n")
    assert main(["synth", "--config", str(root / "small.toml"), "--out", str(root / "data"), "--write-flows"]) == 0
    return root


def test_kinematic_pipeline(dataset, capsys):
    d = dataset
    assert run(capsys, "preprocess", "--in", d / "data/trials.jsonl", "--out", d / "pre.jsonl")[0] == 0
    assert run(capsys, "extract-kin", "--in", d / "pre.jsonl", "--out", d / "feats.jsonl", "--raw")[0] == 0
    rows = [json.loads(line) for line in (d / "feats.jsonl").read_text().splitlines()]
    assert len(rows) == 24 and len(rows[0]["values"]) == 1600
    code, out, _ = run(capsys, "train", "--features", d / "feats.jsonl", "--out", d / "kmodel.bin")
    assert code == 0 and "6 pairwise" in out
    code, out, _ = run(capsys, "evaluate", "--dataset", d / "data", "--track", "kin", "--out", d / "rk")
    assert code == 0 and "All-class" in out
    for name in ("results.json", "tables.txt", "fingerprint.json", "confusion_allclass.csv"):
        assert (d / "rk" / name).exists()
    code, out, _ = run(capsys, "evaluate", "--rerun", d / "rk/fingerprint.json", "--out", d / "rk2")
    assert code == 0
    assert (d / "rk/results.json").read_bytes() == (d / "rk2/results.json").read_bytes()
    code, out, _ = run(capsys, "report", "--results", d / "rk")
    assert code == 0 and "Pouring vs. Placing" in out


def test_video_pipeline(dataset, capsys):
    d = dataset
    code, _, _ = run(capsys, "extract-dt", "--in", d / "data/manifest.jsonl", "--out", d / "desc",
                     "--L", 5, "--flow", "files")
    assert code == 0
    assert len(list((d / "desc").iterdir())) == 24
    assert run(capsys, "build-vocab", "--descriptors", d / "desc", "--S", 16, "--out", d / "vocab.bin")[0] == 0
    code, out, _ = run(capsys, "encode", "--descriptors", d / "desc", "--vocab", d / "vocab.bin",
                       "--manifest", d / "data/manifest.jsonl", "--out", d / "hist.jsonl")
    assert code == 0 and "24" in out
    assert run(capsys, "train", "--histograms", d / "hist.jsonl", "--out", d / "vmodel.bin")[0] == 0
    code, out, _ = run(capsys, "--jobs", 1, "evaluate", "--dataset", d / "data", "--track", "video",
                       "--L", 5, "--S", 16, "--cap", 4000, "--comparisons", "allclass", "--snippet", "0.5,1.0",
                       "--out", d / "rv")
    assert code == 0 and "100%" in out
    doc = json.loads((d / "rv/results.json").read_text())
    assert [s["fraction"] for s in doc["snippet"]] == [0.5, 1.0]
    assert doc["config"]["dt"]["L"] == 5 and doc["config"]["dt"]["n_t"] == 1


def test_bad_snippet_value(dataset, capsys):
    code, _, _ = run(capsys, "evaluate", "--dataset", dataset / "data", "--track", "video",
                     "--snippet", "1.5", "--out", dataset / "bad")
    assert code == 2
