"""Run configuration: a TOML file whose keys use the threshold symbols.

Every section and key is optional; unknown ones are rejected. Angles are
given in degrees in the file and converted to radians internally.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .line2d import MatchParams, MergeParams
from .mapping import KeyframeThresholds
from .optimizer import OptimizerConfig
from .synthetic import NoiseModel, SceneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TriangulationConfig:
    min_plane_angle: float = np.deg2rad(1.0)
    max_row_diff: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    use_lines: bool = True
    threaded: bool = False
    queue_size: int = 4
    scene_file: str | None = None
    features_dir: str | None = None
    merge: MergeParams = field(default_factory=MergeParams)
    match: MatchParams = field(default_factory=MatchParams)
    keyframe: KeyframeThresholds = field(default_factory=KeyframeThresholds)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    triangulation: TriangulationConfig = field(default_factory=TriangulationConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def with_overrides(self, seed=None, use_lines=None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        if use_lines is not None:
            cfg = replace(cfg, use_lines=bool(use_lines),
                          optimizer=replace(cfg.optimizer, use_lines=bool(use_lines)))
        return cfg


# file key -> (attribute, converter)
_DEG = np.deg2rad
_SECTIONS = {
    "merge": ("merge", {
        "delta_theta_deg": ("max_angle", _DEG),
        "delta_d": ("max_midpoint_dist", float),
        "delta_ep": ("max_endpoint_gap", float),
        "min_length": ("min_length", float),
    }),
    "match": ("match", {
        "delta_S": ("min_score", float),
        "delta_N": ("min_shared_points", int),
        "assoc_max_dist": ("assoc_max_dist", float),
    }),
    "keyframe": ("keyframe", {
        "delta_d_kf": ("min_distance", float),
        "delta_theta_kf_deg": ("min_angle", _DEG),
        "N1_kf": ("low_track", int),
        "N2_kf": ("critical_track", int),
        "N_go_kf": ("window", int),
    }),
    "optimizer": ("optimizer", {
        "huber_delta": ("huber_delta", float),
        "sigma_point": ("sigma_point", float),
        "sigma_line": ("sigma_line", float),
        "initial_damping": ("initial_damping", float),
        "damping_up": ("damping_up", float),
        "damping_down": ("damping_down", float),
        "max_iterations": ("max_iterations", int),
        "relative_tolerance": ("relative_tolerance", float),
        "step_tolerance": ("step_tolerance", float),
        "outlier_chi2": ("outlier_chi2", float),
        "min_line_parallax_deg": ("min_line_parallax", _DEG),
    }),
    "triangulation": ("triangulation", {
        "min_plane_angle_deg": ("min_plane_angle", _DEG),
        "max_row_diff": ("max_row_diff", float),
    }),
    "noise": ("noise", {f.name: (f.name, float) for f in fields(NoiseModel)}),
    "scene": ("scene", {f.name: (f.name, None) for f in fields(SceneConfig)}),
}
_RUN_KEYS = {"seed": int, "use_lines": bool, "threaded": bool, "queue_size": int,
             "scene_file": str, "features_dir": str}


def config_from_dict(data):
    cfg = RunConfig()
    updates = {}
    for key, value in data.items():
        if key == "run":
            if not isinstance(value, dict):
                raise ConfigError("[run] must be a table")
            for k, v in value.items():
                if k not in _RUN_KEYS:
                    raise ConfigError(f"unknown key run.{k}")
                updates[k] = _RUN_KEYS[k](v)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section [{key}]")
        attr, keymap = _SECTIONS[key]
        sub = {}
        for k, v in value.items():
            if k not in keymap:
                raise ConfigError(f"unknown key {key}.{k}")
            name, conv = keymap[k]
            if conv is None:
                v = tuple(v) if isinstance(v, list) else v
            else:
                v = conv(v)
            sub[name] = v
        try:
            updates[attr] = replace(getattr(cfg, attr), **sub)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{key}]: {exc}") from exc
    try:
        cfg = replace(cfg, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.queue_size < 1:
        raise ConfigError("queue_size must be at least 1")
    return cfg.with_overrides(use_lines=cfg.use_lines)


def load_config(path):
    with open(path, "rb") as f:
        return config_from_dict(tomllib.load(f))
