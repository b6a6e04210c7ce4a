import json

import numpy as np
import pytest

from graphdiag.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from graphdiag.data import load_runs_csv
from graphdiag.graph import AdjacencyMatrix

SMALL_SYNTH = ["--nodes", "5", "--runs", "3", "--samples", "60", "--change-point", "20", "--seed", "3"]
TINY_TRAIN = ["--window", "10", "--hidden", "8", "--embed-dim", "4", "--epochs", "1", "--stride", "10",
              "--batch", "16", "--change-point", "20"]


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--workdir", str(d), *SMALL_SYNTH]) == EXIT_OK
    return d


def train(workdir, *extra):
    return main(["train", "--workdir", str(workdir), "--data", "synth.csv", *TINY_TRAIN, *extra])


def test_default_synth_layout(tmp_path):
    assert main(["synth", "--workdir", str(tmp_path)]) == EXIT_OK
    runs = load_runs_csv(tmp_path / "synth.csv", 300)
    assert len(runs) == 180 and len({r.state_id for r in runs}) == 9
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert np.asarray(truth["ground_truth"]).shape == (12, 12)


def test_synth_is_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth", "--workdir", str(tmp_path / sub), *SMALL_SYNTH]) == EXIT_OK
    assert (tmp_path / "a/synth.csv").read_bytes() == (tmp_path / "b/synth.csv").read_bytes()
    assert (tmp_path / "a/truth.json").read_bytes() == (tmp_path / "b/truth.json").read_bytes()


def test_synth_unstable_process_reports_radius(tmp_path, capsys):
    code = main(["synth", "--workdir", str(tmp_path), "--nodes", "6", "--gt-density", "1.0", "--runs", "1"])
    assert code == EXIT_CONFIG
    assert "radius" in capsys.readouterr().err
    assert not (tmp_path / "synth.csv").exists()


def test_train_repeats_write_reports_and_mean(small):
    assert train(small, "--out", "rep", "--repeats", "3") == EXIT_OK
    out = small / "rep"
    for s in range(3):
        assert (out / f"checkpoint_seed{s}.json").exists()
        assert (out / f"report_seed{s}.json").exists()
    mean = json.loads((out / "report_mean.json").read_text())
    assert mean["version"] == "fddreport-v1"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0, 1, 2] and len(manifest["checkpoints"]) == 3
    assert manifest["wall_clock_seconds"] > 0


def test_manifest_hash_is_stable_and_sensitive(small):
    hashes = []
    for out, lr in (("h1", "0.001"), ("h1", "0.001"), ("h1", "0.01")):
        assert train(small, "--out", out, "--lr", lr, "--no-eval") == EXIT_OK
        hashes.append(json.loads((small / out / "manifest.json").read_text())["config_hash"])
    assert hashes[0] == hashes[1] != hashes[2]


def test_config_file_and_flag_override(small):
    (small / "cfg.txt").write_text("# tiny run\nalpha = 0.5\nhidden = 6\nlr = 0.01\n")
    assert train(small, "--config", "cfg.txt", "--out", "cfg", "--lr", "0.002", "--no-eval") == EXIT_OK
    config = json.loads((small / "cfg/manifest.json").read_text())["config"]
    assert config["alpha"] == 0.5 and config["hidden"] == 8 and config["lr"] == 0.002


@pytest.mark.parametrize("bad", [["--alpha", "0"], ["--graph", "bogus"], ["--batch", "1"], ["--epochs", "0"]])
def test_invalid_train_config_writes_nothing(small, bad):
    assert train(small, "--out", "bad", *bad) == EXIT_CONFIG
    assert not (small / "bad").exists()


def test_unknown_config_key(small, capsys):
    (small / "typo.txt").write_text("hiden = 3\n")
    assert train(small, "--config", "typo.txt", "--out", "typo") == EXIT_CONFIG
    assert "hiden" in capsys.readouterr().err
    assert not (small / "typo").exists()


def test_missing_data_file(tmp_path):
    assert main(["train", "--workdir", str(tmp_path), "--data", "nope.csv"]) == EXIT_CONFIG


def test_evaluate_guards(small, capsys):
    assert train(small, "--out", "ev") == EXIT_OK
    ev = ["evaluate", "--workdir", str(small), "--checkpoint", "ev/checkpoint.json", "--data", "synth.csv"]
    assert main(ev + ["--out", "e0"]) == EXIT_CONFIG
    assert "--allow-train-eval" in capsys.readouterr().err
    assert main(ev + ["--out", "e1", "--holdout-only"]) == EXIT_OK
    held = json.loads((small / "e1.json").read_text())
    trained_report = json.loads((small / "ev/report.json").read_text())
    assert held["confusion"] == trained_report["confusion"]
    assert main(ev + ["--out", "e2", "--allow-train-eval"]) == EXIT_OK
    assert np.sum(json.loads((small / "e2.json").read_text())["confusion"]) > np.sum(held["confusion"])


def test_evaluate_channel_mismatch(small, tmp_path):
    assert train(small, "--out", "mm", "--no-eval") == EXIT_OK
    assert main(["synth", "--workdir", str(tmp_path), *SMALL_SYNTH[2:], "--nodes", "4"]) == EXIT_OK
    code = main(["evaluate", "--workdir", str(tmp_path), "--checkpoint", str(small / "mm/checkpoint.json"),
                 "--data", "synth.csv", "--allow-train-eval"])
    assert code == EXIT_DATA


def test_export_graph(small):
    assert train(small, "--out", "ex", "--no-eval") == EXIT_OK
    base = ["export-graph", "--workdir", str(small), "--checkpoint", "ex/checkpoint.json"]
    assert main(base + ["--out", "ex/g"]) == EXIT_OK
    a = AdjacencyMatrix.load(small / "ex/g_adjacency.json")
    assert a.n_nodes == 5 and np.all(np.abs(a.weights) < 1)
    assert AdjacencyMatrix.load(small / "ex/g_adjacency.csv").weights.tolist() == a.weights.tolist()
    assert a.to_json() == (small / "ex/g_adjacency.json").read_text()
    assert (small / "ex/g_importance.csv").read_text().startswith("node,importance")
    assert main(base + ["--out", "ex/k", "--top-k", "3"]) == EXIT_OK
    k = AdjacencyMatrix.load(small / "ex/k_adjacency.json")
    assert np.all((k.weights != 0).sum(axis=1) <= 3)


def test_export_graph_ensemble_and_baseline(small, capsys):
    assert train(small, "--out", "ens", "--model", "ensemble", "--modules", "2", "--no-eval") == EXIT_OK
    base = ["export-graph", "--workdir", str(small)]
    assert main(base + ["--checkpoint", "ens/checkpoint.json", "--out", "ens/g"]) == EXIT_OK
    assert (small / "ens/g_m0_adjacency.json").exists() and (small / "ens/g_m1_adjacency.json").exists()
    assert train(small, "--out", "mlp", "--model", "mlp", "--no-eval") == EXIT_OK
    assert main(base + ["--checkpoint", "mlp/checkpoint.json"]) == EXIT_CONFIG
    assert "baseline" in capsys.readouterr().err


def test_graph_quality(small):
    (small / "eye.json").write_text(AdjacencyMatrix(np.eye(5), "imported").to_json())
    args = ["graph-quality", "--workdir", str(small), "--data", "synth.csv", "--window", "10", "--hidden", "6",
            "--epochs", "1", "--stride", "10", "--batch", "16", "--change-point", "20"]
    assert main(args + ["--adjacency", "eye.json", "--out", "gq"]) == EXIT_OK
    doc = json.loads((small / "gq.json").read_text())
    assert doc["version"] == "graphquality-v1" and len(doc["rows"]) == 2
    assert len((small / "gq.txt").read_text().strip().splitlines()) == 3


def test_graph_quality_node_mismatch(small, capsys):
    (small / "eye3.json").write_text(AdjacencyMatrix(np.eye(3), "imported").to_json())
    code = main(["graph-quality", "--workdir", str(small), "--data", "synth.csv", "--adjacency", "eye3.json",
                 "--change-point", "20"])
    assert code == EXIT_DATA
    assert "N=3" in capsys.readouterr().err


def test_malformed_csv_exit_code(tmp_path):
    (tmp_path / "bad.csv").write_text("run_id,state_id,sample,ch_0\nr,0,0,abc\n")
    assert main(["train", "--workdir", str(tmp_path), "--data", "bad.csv"]) == EXIT_DATA
