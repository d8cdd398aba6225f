import csv
import json

import pytest

from servicetime.cli import main

SMALL = ["--set", "model.d_model=8", "--set", "model.temporal_heads=2",
        "--set", "model.inter_hidden=8", "--set", "model.inter_heads=2", "--set", "model.mlp_hidden=8",
        "--set", "train.epochs=2", "--set", "gpr.use_season=false", "--set", "gpr.cap=300"]
TINY = [*SMALL, "--set", "model.window=7"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["simulate", "--days", "70", "--seed", "5", "--out", str(root / "sim")]) == 0
    data = ["--data", str(root / "sim" / "requests.csv"), "--regions", str(root / "sim" / "regions.geojson")]
    assert main(["train", *data, *TINY, "--out", str(root / "train")]) == 0
    return root, data


def test_simulate_outputs(workspace):
    root, _ = workspace
    sim = root / "sim"
    for name in ("requests.csv", "requests_truth.csv", "regions.geojson", "phenomena.json", "run.json"):
        assert (sim / name).exists()


def test_train_artifacts_and_manifest(workspace):
    root, _ = workspace
    out = root / "train"
    assert (out / "model.zip").exists() and (out / "panel.npz").exists()
    log = list(csv.DictReader(open(out / "train_log.csv")))
    assert len(log) == 2 and {"epoch", "train_loss", "val_loss"} <= set(log[0])
    man = json.loads((out / "run.json").read_text())
    assert man["seed"] == 0 and len(man["config_sha256"]) == 64 and man["package_version"]
    assert man["config"]["model"]["window"] == 7


def test_config_file_train(workspace, tmp_path):
    root, data = workspace
    cfg = tmp_path / "run.toml"
    cfg.write_text("[train]\nepochs = 1\nseed = 3\n[model]\nwindow = 7\nd_model = 8\ntemporal_heads = 2\n"
                   "inter_hidden = 8\ninter_heads = 2\nmlp_hidden = 8\n[gpr]\ncap = 200\n")
    assert main(["train", "--config", str(cfg), *data, "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "run.json").read_text())["seed"] == 3


def test_evaluate(workspace, tmp_path):
    root, data = workspace
    ck = str(root / "train" / "model.zip")
    assert main(["evaluate", *data, "--checkpoint", ck, "--split", "test", "--baselines",
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics_test.csv")))
    assert {r["variant"] for r in rows} == {"full", "train-mean", "gpr-only"}
    for r in rows:
        assert abs(float(r["RMSE"]) ** 2 - float(r["MSE"])) < 1e-9
        assert float(r["MAE"]) <= float(r["RMSE"]) + 1e-12


def test_ablate_from_checkpoints(workspace, tmp_path):
    root, data = workspace
    ck = str(root / "train" / "model.zip")
    assert main(["ablate", *data, "--variants", "full", "--checkpoints", f"full={ck}",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ablation.csv").exists() and (tmp_path / "ablation.json").exists()
    assert main(["ablate", *data, "--variants", "full,-t", "--checkpoints", f"full={ck}",
                 "--out", str(tmp_path)]) == 1


def test_sweep_window(workspace, tmp_path):
    _, data = workspace
    assert main(["sweep", *data, *SMALL, "--param", "T", "--values", "5,7,9", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweep.csv")))
    assert [r["value"] for r in rows] == ["5", "7", "9"]
    assert {r["param"] for r in rows} == {"model.window"}


def test_analyze(workspace, tmp_path):
    _, data = workspace
    assert main(["analyze", *data, "--out", str(tmp_path)]) == 0
    for name in ("spatial_scatter.svg", "temporal_series.svg", "type_boxes.svg", "type_boxes.csv",
                 "demand_service_pearson.csv"):
        assert (tmp_path / name).exists()


def test_ingest_and_score(workspace, tmp_path):
    _, data = workspace
    assert main(["ingest", *data, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "ingest_report.json").read_text())
    assert rep["retained"] + rep["skipped"] + rep["capped"] + rep["unassigned"] == rep["total"]
    assert (tmp_path / "panel.npz").exists()
    assert main(["score-workloads", *data, "--out", str(tmp_path)]) == 0
    header = next(csv.reader(open(tmp_path / "requests_scored.csv")))
    assert "Workload" in header


def test_predict(workspace, tmp_path, capsys):
    root, _ = workspace
    req = {"created_at": "2023-03-10T09:00:00", "request_type": "Bulk Trash", "longitude": -85.37,
           "latitude": 35.02, "description": "sofa"}
    argv = ["predict", "--data", str(root / "train" / "panel.npz"), "--regions",
            str(root / "sim" / "regions.geojson"), "--checkpoint", str(root / "train" / "model.zip"),
            "--out", str(tmp_path)]
    assert main([*argv, "--request", json.dumps(req)]) == 0
    out = json.loads((tmp_path / "predictions.json").read_text())
    assert out["status"] == 200 and out["service_time_days"] >= 0
    assert main([*argv, "--request", json.dumps(dict(req, request_type="Pony Rides"))]) == 1


def test_exit_codes(workspace, tmp_path, capsys):
    _, data = workspace
    assert main(["train", *data, "--set", "train.bogus=1", "--out", str(tmp_path)]) == 2
    assert "train.bogus" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("model:\n  windw: 3\n")
    assert main(["train", "--config", str(bad), *data, "--out", str(tmp_path)]) == 2
    assert "model.windw" in capsys.readouterr().err
    assert main(["evaluate", *data, "--checkpoint", str(tmp_path / "missing.zip"), "--out", str(tmp_path)]) == 1
    assert main(["train", "--out", str(tmp_path)]) == 2  # no data configured
