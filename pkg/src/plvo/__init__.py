"""Stereo visual odometry with point and line features."""

from .config import ConfigError, RunConfig, load_config
from .evaluation import Trajectory, evaluate_ate, load_tum, save_tum
from .geometry import (
    DegenerateGeometryError,
    LineSegment2D,
    OrthonormalLine,
    PinholeIntrinsics,
    PluckerLine,
    PoseSE3,
    StereoRig,
)
from .mapping import Frame, KeyframeThresholds, Map, keyframe_decision
from .optimizer import OptimizerConfig, bundle_adjust, estimate_pose
from .pipeline import run_odometry, run_pipeline
from .synthetic import NoiseModel, SceneConfig, SyntheticFrontend, generate_scene

__all__ = [
    "ConfigError", "RunConfig", "load_config",
    "Trajectory", "evaluate_ate", "load_tum", "save_tum",
    "DegenerateGeometryError", "LineSegment2D", "OrthonormalLine", "PinholeIntrinsics",
    "PluckerLine", "PoseSE3", "StereoRig",
    "Frame", "KeyframeThresholds", "Map", "keyframe_decision",
    "OptimizerConfig", "bundle_adjust", "estimate_pose",
    "run_odometry", "run_pipeline",
    "NoiseModel", "SceneConfig", "SyntheticFrontend", "generate_scene",
]
__version__ = "0.1.0"
