import json
import subprocess
import sys

import numpy as np
import pytest

from zigcompress.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from zigcompress.serialize import load_model, save_model

TRAIN = ["--model", "demonet_small", "--dataset", "synthetic:n=160", "--steps", "30", "--lr", "0.02",
         "--batch-size", "16", "--optimizer", "sgd_momentum", "--sparsity", "0.5"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    runs = {}
    for mode in ("prune", "erase"):
        out = tmp_path_factory.mktemp(mode)
        assert main(["train", *TRAIN, "--mode", mode, "--out", str(out)]) == EXIT_OK
        runs[mode] = out
    return runs


@pytest.mark.parametrize("mode,dot", [("prune", "pruning_dependency.dot"), ("erase", "segments.dot")])
def test_analyze(tmp_path, capsys, mode, dot):
    assert main(["analyze", "--model", "demonet", "--mode", mode, "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["mode"] == mode and summary["zigs"] > 0
    assert (tmp_path / "partition.json").exists()
    assert (tmp_path / dot).read_text().startswith("digraph")


def test_train_writes_artifacts(trained):
    for mode, out in trained.items():
        info = json.loads((out / "classification.json").read_text())
        assert info["mode"] == mode and 0.0 <= info["test_accuracy"] <= 1.0
        assert info["zero_groups"] == info["classification"]["accepted"]
        assert (out / "history.csv").read_text().count("\n") == 31
        assert (out / "checkpoint.bin").exists()


@pytest.mark.parametrize("mode", ["prune", "erase"])
def test_compress_and_verify(trained, capsys, mode):
    out = trained[mode]
    assert main(["compress", "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "params:" in text and "pass=True" in text
    assert main(["verify", str(out / "checkpoint.json"), str(out / "sub" / "model.json")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["max_abs_diff"] < 1e-5
    prov = json.loads((out / "sub" / "provenance.json").read_text())
    assert prov["mode"] == mode


def test_verify_fails_on_different_weights(trained, tmp_path):
    g, p = load_model(trained["prune"] / "checkpoint.json")
    q = p.copy()
    name = g.trainable_names()[0]
    q[name] = q[name] + np.float32(0.5)
    save_model(g, q, tmp_path / "other.json")
    assert main(["verify", str(trained["prune"] / "checkpoint.json"), str(tmp_path / "other.json")]) == EXIT_FAIL


def test_same_seed_bit_identical_checkpoints(tmp_path):
    blobs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert main(["train", *TRAIN[:-4], "--steps", "12", "--mode", "prune", "--out", str(out)]) == EXIT_OK
        blobs.append((out / "checkpoint.bin").read_bytes())
    assert blobs[0] == blobs[1]


def test_zero_steps_is_an_error(tmp_path, capsys):
    assert main(["train", "--model", "chain", "--mode", "prune", "--steps", "0", "--out", str(tmp_path)]) == EXIT_ERROR
    assert "warm-up requires" in capsys.readouterr().err


def test_tampered_checkpoint(trained, tmp_path, capsys):
    src = trained["prune"]
    info = json.loads((src / "classification.json").read_text())
    important = sorted(set(info["classification"]["important"]) - set(info["classification"]["redundant"]))
    g, p = load_model(src / "checkpoint.json")
    from zigcompress.prune_space import pruning_space

    zig = {z.id for z in pruning_space(g).zig_groups}
    info["classification"]["redundant"].append(next(i for i in important if i in zig))
    save_model(g, p, tmp_path / "checkpoint.json")
    (tmp_path / "classification.json").write_text(json.dumps(info))
    assert main(["compress", "--out", str(tmp_path)]) == EXIT_ERROR
    assert "inconsistent" in capsys.readouterr().err


def test_zero_sparsity_compress_is_identity(tmp_path, capsys):
    assert main(["train", "--model", "twin_branch", "--mode", "prune", "--steps", "10", "--sparsity", "0",
                 "--dataset", "synthetic:n=64", "--batch-size", "16", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["compress", "--out", str(tmp_path)]) == EXIT_OK
    _, p = load_model(tmp_path / "checkpoint.json")
    _, q = load_model(tmp_path / "sub" / "model.json")
    assert p.bit_equal(q)


def test_non_classifier_cannot_train(tmp_path, capsys):
    assert main(["train", "--model", "chain", "--mode", "prune", "--steps", "10", "--out", str(tmp_path)]) == EXIT_ERROR
    assert "class logits" in capsys.readouterr().err


def test_broken_manifest(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["analyze", "--model", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == EXIT_ERROR
    assert "not valid JSON" in capsys.readouterr().err


def test_config_file_with_overrides(tmp_path, capsys):
    cfg = {"model": "chain", "mode": "erase", "optimizer": {"steps": 10}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["analyze", "--config", str(tmp_path / "cfg.json"), "--mode", "prune", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["mode"] == "prune"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "zigcompress", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("analyze", "train", "compress", "verify"):
        assert cmd in res.stdout
