import json
import subprocess
import sys

import numpy as np
import pytest

from spectral_adapt.cli import main
from spectral_adapt.graph import load_graph
from spectral_adapt.trainer import TrainConfig


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--n", "160", "--rate", "0.1", "--p-in", "0.05", "--dim", "4",
                 "--seed", "2", "--out-dir", str(d), "--quiet"]) == 0
    return d


@pytest.fixture
def k2_dir(tmp_path):
    (tmp_path / "edges.txt").write_text("0 1\n")
    (tmp_path / "features.csv").write_text("0\n0\n")
    return tmp_path


def test_synth_round_trip(data_dir):
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["seed"] == 2
    assert manifest["config_echo"]["n"] == 160
    g = load_graph(data_dir / "edges.txt", data_dir / "features.csv", data_dir / "labels.txt")
    assert g.num_nodes == 160 and g.num_features == 4
    assert manifest["num_edges"] == g.num_edges
    assert manifest["num_anomalies"] == int(g.labels.sum())


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "50", "--seed", "9", "--out-dir", str(tmp_path / name), "--quiet"]) == 0
    for f in ("edges.txt", "features.csv", "labels.txt", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_rejects_empty_graph(tmp_path, capsys):
    code, out = run(["synth", "--n", "0", "--out-dir", tmp_path], capsys)
    assert code != 0
    assert "error" in out.err


def test_fingerprint_k2(k2_dir, capsys):
    code, out = run(["fingerprint", "--data-dir", k2_dir, "--quiet"], capsys)
    assert code == 0
    fp = json.loads(out.out)["fingerprint"]
    assert len(fp) == 20
    assert np.allclose(fp, [1, 1, 0, -2] + [0] * 16)


def test_fingerprint_modes_agree(data_dir, tmp_path, capsys):
    _, out = run(["fingerprint", "--data-dir", data_dir, "--mode", "exact"], capsys)
    exact = np.array(json.loads(out.out)["fingerprint"])
    target = tmp_path / "fp.json"
    _, out = run(["fingerprint", "--data-dir", data_dir, "--mode", "stochastic", "--output", target], capsys)
    sto = np.array(json.loads(out.out)["fingerprint"])
    assert json.loads(target.read_text())["fingerprint"] == sto.tolist()
    near_zero = np.abs(exact[:4]) < 0.1
    assert np.all(np.where(near_zero, np.abs(sto[:4] - exact[:4]) <= 0.02, np.abs(sto[:4] - exact[:4]) <= 0.05 * np.abs(exact[:4])))
    assert np.array_equal(sto[4:], exact[4:])


def test_train_smoke_and_default_echo(data_dir, tmp_path, capsys):
    code, out = run(["train", "--data-dir", data_dir, "--runs", "3", "--epochs", "2", "--out-dir", tmp_path], capsys)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    echo = report["config_echo"]
    assert (echo["heads"], echo["order"], echo["lr"], echo["warmup"]) == (3, 2, 0.01, 5)
    assert (echo["lambda_contrast"], echo["lambda_div"], echo["hidden"]) == (0.1, 0.05, 64)
    assert echo["epochs"] == 2
    assert len(report["aggregate"]["runs"]) == 3
    assert 0.0 <= report["aggregate"]["trimmed_auc"] <= 1.0
    log = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 6
    assert (tmp_path / "checkpoint.json").is_file()
    assert "AUC" in (tmp_path / "report.txt").read_text()
    assert "AUC" in out.out


def test_train_defaults_echo_epochs(data_dir, tmp_path):
    # the echo under pure defaults reports the stated training schedule
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"runs": 3, "epochs": 1}))
    assert main(["train", "--data-dir", str(data_dir), "--config", str(cfg), "--out-dir", str(tmp_path), "--quiet"]) == 0
    echo = json.loads((tmp_path / "report.json").read_text())["config_echo"]
    assert echo == {**TrainConfig().to_dict(), "runs": 3, "epochs": 1}


def test_config_precedence(data_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"runs": 3, "epochs": 2, "heads": 2, "lr": 0.05}))
    out = tmp_path / "out"
    assert main(["train", "--data-dir", str(data_dir), "--config", str(cfg), "--heads", "4",
                 "--out-dir", str(out), "--quiet"]) == 0
    echo = json.loads((out / "report.json").read_text())["config_echo"]
    assert echo["heads"] == 4 and echo["lr"] == 0.05 and echo["epochs"] == 2


def test_global_flags_before_subcommand(data_dir, tmp_path):
    assert main(["--seed", "4", "--out-dir", str(tmp_path), "--quiet", "train", "--data-dir", str(data_dir),
                 "--runs", "3", "--epochs", "1"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["aggregate"]["seeds"] == [4, 5, 6]


def test_unknown_config_key_rejected(data_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"runs": 3, "dropout": 0.5}))
    code, out = run(["train", "--data-dir", data_dir, "--config", cfg, "--out-dir", tmp_path], capsys)
    assert code != 0
    assert "dropout" in out.err


def test_train_ablation_rows(data_dir, tmp_path):
    assert main(["train", "--data-dir", str(data_dir), "--runs", "3", "--epochs", "1", "--ablation",
                 "--out-dir", str(tmp_path), "--quiet"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["ablation"]) == 6
    assert len((tmp_path / "report.txt").read_text().strip().splitlines()) == 8
    assert len(list((tmp_path / "checkpoints").glob("*.json"))) == 6


def test_ablation_needs_three_runs(data_dir, tmp_path):
    assert main(["train", "--data-dir", str(data_dir), "--runs", "2", "--epochs", "1", "--ablation",
                 "--out-dir", str(tmp_path), "--quiet"]) != 0


@pytest.fixture(scope="module")
def trained_dir(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("trained")
    assert main(["train", "--data-dir", str(data_dir), "--runs", "3", "--epochs", "3", "--out-dir", str(d), "--quiet"]) == 0
    return d


def test_analyze_single_node(data_dir, trained_dir, tmp_path):
    assert main(["analyze", "--data-dir", str(data_dir), "--checkpoint", str(trained_dir / "checkpoint.json"),
                 "--nodes", "3", "--out-dir", str(tmp_path), "--quiet"]) == 0
    lines = (tmp_path / "node_3.csv").read_text().strip().splitlines()
    assert lines[0].split(",") == ["lambda", "head_1", "head_2", "head_3", "weighted"]
    assert len(lines) == 202
    manifest = json.loads((tmp_path / "analysis_manifest.json").read_text())
    assert manifest["files"] == ["node_3.csv"]


def test_analyze_class_average_deterministic(data_dir, trained_dir, tmp_path):
    for name in ("a", "b"):
        assert main(["analyze", "--data-dir", str(data_dir), "--checkpoint", str(trained_dir / "checkpoint.json"),
                     "--class-average", "--samples", "4", "--seed", "1", "--out-dir", str(tmp_path / name), "--quiet"]) == 0
    a = (tmp_path / "a" / "class_average.csv").read_bytes()
    assert a == (tmp_path / "b" / "class_average.csv").read_bytes()
    assert len(a.decode().strip().splitlines()) == 202


def test_analyze_json_format(data_dir, trained_dir, tmp_path):
    assert main(["analyze", "--data-dir", str(data_dir), "--checkpoint", str(trained_dir / "checkpoint.json"),
                 "--nodes", "0,1", "--format", "json", "--out-dir", str(tmp_path), "--quiet"]) == 0
    doc = json.loads((tmp_path / "node_1.json").read_text())
    assert len(doc["heads"]) == 3 and len(doc["weighted"]) == 201


def test_analyze_missing_checkpoint(data_dir, tmp_path, capsys):
    code, out = run(["analyze", "--data-dir", data_dir, "--checkpoint", tmp_path / "nope.json", "--nodes", "0",
                     "--out-dir", tmp_path], capsys)
    assert code != 0
    assert "checkpoint not found" in out.err


def test_module_entry_point(k2_dir):
    proc = subprocess.run([sys.executable, "-m", "spectral_adapt", "fingerprint", "--data-dir", str(k2_dir), "--quiet"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert len(json.loads(proc.stdout)["fingerprint"]) == 20
