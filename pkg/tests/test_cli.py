import csv
import json

import numpy as np
import pytest

from plvo.cli import main
from plvo.config import ConfigError, RunConfig, config_from_dict, load_config
from plvo.evaluation import Trajectory, load_tum, save_tum
from plvo.geometry import PoseSE3
from plvo.synthetic import load_scene

from .oracles import random_rotation

CONFIGS = ("configs/default.toml", "configs/noisy.toml")


# -- configuration --------------------------------------------------------------------------

@pytest.mark.parametrize("path", CONFIGS)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.keyframe.min_angle == pytest.approx(np.deg2rad(15))
    assert cfg.merge.max_angle == pytest.approx(np.deg2rad(3))
    assert cfg.optimizer.min_line_parallax == pytest.approx(np.deg2rad(3))


def test_noisy_config_noise_levels():
    n = load_config("configs/noisy.toml").noise
    assert (n.pixel_sigma, n.endpoint_sigma, n.detection_dropout) == (1.0, 2.0, 0.1)


def test_empty_config_is_default():
    assert config_from_dict({}) == RunConfig()


@pytest.mark.parametrize("bad", [
    {"merge": {"delta_x": 1}},
    {"bogus": {}},
    {"run": {"colour": "red"}},
    {"keyframe": {"N1_kf": 10, "N2_kf": 20}},
    {"noise": {"detection_dropout": 2.0}},
    {"scene": {"preset": "spiral"}},
    {"run": {"queue_size": 0}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_overrides_propagate_use_lines():
    cfg = config_from_dict({"run": {"use_lines": False}})
    assert not cfg.use_lines and not cfg.optimizer.use_lines
    cfg = cfg.with_overrides(seed=7, use_lines=True)
    assert cfg.seed == 7 and cfg.optimizer.use_lines


# -- command line --------------------------------------------------------------------------

def write_traj(path, rng, shift=None):
    n = 30
    centers = np.cumsum(rng.normal(0, 0.1, (n, 3)), axis=0)
    if shift is not None:
        centers = centers + shift
    poses = [PoseSE3.from_camera_center(random_rotation(rng), c) for c in centers]
    save_tum(Trajectory(0.1 * np.arange(n), poses), path)


def test_cli_eval(tmp_path, capsys):
    rng = np.random.default_rng(0)
    write_traj(tmp_path / "gt.txt", rng)
    gt = load_tum(tmp_path / "gt.txt")
    est = Trajectory(gt.timestamps, [PoseSE3.from_camera_center(p.rotation.T, p.center + [1, 2, 3])
                                     for p in gt.poses])
    save_tum(est, tmp_path / "est.txt")
    out = tmp_path / "res" / "ate.csv"
    assert main(["eval", "--est", str(tmp_path / "est.txt"), "--gt", str(tmp_path / "gt.txt"),
                 "--out", str(out)]) == 0
    rows = dict(list(csv.reader(open(out)))[1:])
    assert float(rows["ate_rmse_m"]) < 1e-6 and rows["pairs"] == "30"
    assert (tmp_path / "res" / "ate_errors.csv").exists()
    assert "ATE RMSE" in capsys.readouterr().out


def test_cli_scene_gen(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[run]\nseed = 4\n[scene]\nn_frames = 7\nn_points = 100\nn_lines = 10\n')
    out = tmp_path / "scene.json"
    assert main(["scene", "gen", "--config", str(cfg), "--out", str(out)]) == 0
    scene = load_scene(out)
    assert len(scene.poses) == 7 and scene.rng_seed == 4 and len(scene.gt_lines) == 10


def test_cli_run_with_scene_file(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[scene]\nn_frames = 10\n')
    scene = tmp_path / "scene.json"
    assert main(["scene", "gen", "--config", str(cfg), "--out", str(scene)]) == 0
    run_cfg = tmp_path / "run.toml"
    run_cfg.write_text(f'[run]\nscene_file = "{scene}"\n')
    out = tmp_path / "out"
    assert main(["run", "--config", str(run_cfg), "--output", str(out), "--no-lines"]) == 0
    assert "frames 10" in capsys.readouterr().out
    for f in ("trajectory.txt", "groundtruth.txt", "map.json", "metrics.json", "errors.csv",
              "error_curve.csv", "timing.csv", "ba_cost.csv"):
        assert (out / f).exists(), f
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["map_lines"] == 0 and metrics["ate_rmse_m"] < 1e-6


def test_cli_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[nope]\n")
    assert main(["run", "--config", str(bad), "--output", str(tmp_path / "o")]) == 2
    assert main(["eval", "--est", str(tmp_path / "missing.txt"), "--gt", str(bad),
                 "--out", str(tmp_path / "x.csv")]) == 2
    assert "plvo: error" in capsys.readouterr().err


def test_cli_requires_subcommand():
    with pytest.raises(SystemExit):
        main([])
