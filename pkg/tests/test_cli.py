import json
import subprocess
import sys
from types import SimpleNamespace

import pytest
import torch

from timealign import cli
from timealign.model import TimeAlignDetector

torch.set_num_threads(1)

CONFIG = {
    "seed": 0,
    "classes": ["car"],
    "bev": {"extent": 8.0, "resolution": 1.0},
    "scene": {"num_objects": 2, "area_extent": 6.0, "duration": 6},
    "simulate": {"num_scenes": 2},
    "sensor": {"points_per_object": 60, "ground_points": 64},
    "camera": {"channels": 2, "noise_sigma": 0.05, "center_jitter": 0.0},
    "model": {"encoder_hidden": 12, "lidar_channels": 8,
              "predictor": {"patch_size": 2, "embed_dim": 16, "depths": 2,
                            "num_heads": 2, "window_size": 2}},
    "train": {"stages": [[1, 0.5]], "lr": 1e-3, "batch_size": 8,
              "lag": {"alpha": 0.5, "max_lag": 1}},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    data = root / "data"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(data)]) == 0
    return SimpleNamespace(root=root, cfg=cfg, data=data)


@pytest.fixture(scope="module")
def run_dir(workdir):
    out = workdir.root / "run"
    rc = cli.main(["train", "--config", str(workdir.cfg),
                   "--data", str(workdir.data), "--out", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def report_dir(workdir, run_dir):
    out = workdir.root / "reports"
    rc = cli.main(["eval", "--ckpt", str(run_dir / "final.ckpt"),
                   "--data", str(workdir.data), "--lag", "1",
                   "--config", str(workdir.cfg),
                   "--out", str(out / "lag1.json")])
    assert rc == 0
    return out


# --- the simulate -> train -> eval -> report chain ---

def test_simulate_writes_dataset(workdir):
    names = {p.name for p in workdir.data.iterdir()}
    assert {"poses.json", "scenes.json", "sim_meta.json"} <= names
    assert len(list(workdir.data.glob("*.bin"))) == 12  # 2 scenes x 6 frames
    scenes = json.loads((workdir.data / "scenes.json").read_text())
    assert [s["scene_token"] for s in scenes] == ["scene-000", "scene-001"]
    meta = json.loads((workdir.data / "sim_meta.json").read_text())
    assert meta["classes"] == ["car"]
    assert meta["camera"]["channels"] == 2


def test_train_writes_run_artifacts(run_dir):
    assert (run_dir / "final.ckpt").exists()
    assert (run_dir / "best.ckpt").exists()
    history = json.loads((run_dir / "history.json").read_text())
    assert len(history) == 1
    assert history[0]["lambda_pred"] == 0.5


def test_eval_report_document(workdir, report_dir, capsys):
    doc = json.loads((report_dir / "lag1.json").read_text())
    assert doc["model"] == "timealign"
    assert list(doc["conditions"]) == ["LiDAR Lagging(T-1)"]
    assert "car" in doc["conditions"]["LiDAR Lagging(T-1)"]["per_class"]
    # a second run at lag 0 with an explicit label
    rc = cli.main(["eval", "--ckpt", str(workdir.root / "run" / "final.ckpt"),
                   "--data", str(workdir.data), "--lag", "0",
                   "--config", str(workdir.cfg), "--label", "mine"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "AP-car" in out and "mine" in out and "LiDAR(T)" in out


def test_eval_baseline_flag_loads_shared_weights(workdir, run_dir):
    rc = cli.main(["eval", "--ckpt", str(run_dir / "final.ckpt"),
                   "--data", str(workdir.data), "--lag", "0",
                   "--config", str(workdir.cfg), "--baseline"])
    assert rc == 0


def test_eval_without_config_cannot_size_the_model(workdir, run_dir):
    # sim_meta carries no model section, so the default-sized model matches
    # nothing in the checkpoint
    rc = cli.main(["eval", "--ckpt", str(run_dir / "final.ckpt"),
                   "--data", str(workdir.data), "--lag", "0"])
    assert rc == 3


def test_report_table_from_directory(report_dir, capsys):
    assert cli.main(["report", "--in", str(report_dir)]) == 0
    out = capsys.readouterr().out
    assert "AP-car" in out and "timealign" in out
    assert cli.main(["report", "--in", str(report_dir),
                     "--format", "csv"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].split(",")[:2] == ["model", "condition"]


# --- exit codes ---

def test_missing_config_is_config_error(tmp_path):
    rc = cli.main(["simulate", "--config", str(tmp_path / "nope.json"),
                   "--out", str(tmp_path / "d")])
    assert rc == 2


def test_bad_json_is_config_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert cli.main(["simulate", "--config", str(p),
                     "--out", str(tmp_path / "d")]) == 2
    p.write_text("[1, 2]")
    assert cli.main(["simulate", "--config", str(p),
                     "--out", str(tmp_path / "d")]) == 2


def test_train_on_missing_data_is_data_error(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    rc = cli.main(["train", "--config", str(cfg),
                   "--data", str(tmp_path / "missing")])
    assert rc == 3


def test_train_from_nan_checkpoint_diverges(workdir, tmp_path):
    doc = json.loads(workdir.cfg.read_text())
    torch.manual_seed(0)
    model = TimeAlignDetector(cli.pipeline_from(doc))
    with torch.no_grad():
        model.encoder.conv1.weight.fill_(float("nan"))
    bad = tmp_path / "bad.ckpt"
    model.param_store().save(bad)
    rc = cli.main(["train", "--config", str(workdir.cfg),
                   "--data", str(workdir.data), "--init", str(bad),
                   "--out", str(tmp_path / "run")])
    assert rc == 4


def test_report_on_empty_directory(tmp_path):
    assert cli.main(["report", "--in", str(tmp_path)]) == 3
    assert cli.main(["report", "--in", str(tmp_path / "nothing")]) == 3


def test_argparse_rejects_bad_invocations():
    with pytest.raises(SystemExit):
        cli.main(["simulate"])  # missing required flags
    with pytest.raises(SystemExit):
        cli.main(["eval", "--ckpt", "x", "--data", "y", "--lag", "7"])
    with pytest.raises(SystemExit):
        cli.main([])


# --- gradient-check command ---

def test_gradcheck_registry_covers_every_stage():
    assert set(cli._gradcheck_registry()) == {
        "conv2d", "grid-sample", "deformable-conv", "attention",
        "encoder", "predictor", "fusion", "head"}


def test_gradcheck_single_module(capsys):
    assert cli.main(["gradcheck", "--module", "conv2d"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_unknown_module():
    assert cli.main(["gradcheck", "--module", "sigmoid"]) == 2


def test_module_entrypoint_runs_as_subprocess():
    proc = subprocess.run(
        [sys.executable, "-m", "timealign.cli", "gradcheck",
         "--module", "conv2d"],
        capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0
    assert "PASS" in proc.stdout
