"""Trajectories, TUM-format I/O, absolute trajectory error and reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import PoseSE3

ASSOCIATION_WINDOW = 0.01  # seconds


@dataclass
class Trajectory:
    """Time-ordered world-to-camera poses."""

    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one pose per timestamp")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self):
        return np.array([p.center for p in self.poses]).reshape(-1, 3)


def save_tum(traj, path):
    """``timestamp tx ty tz qx qy qz qw`` per line, camera-to-world."""
    with open(path, "w") as f:
        for ts, pose in zip(traj.timestamps, traj.poses):
            c = pose.center
            q = Rotation.from_matrix(pose.rotation.T).as_quat()
            if q[3] < 0:
                q = -q
            f.write(f"{ts:.6f} {c[0]:.9f} {c[1]:.9f} {c[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def load_tum(path):
    stamps, poses = [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.replace(",", " ").split()]
            if len(vals) != 8:
                raise ValueError(f"malformed TUM record: {line!r}")
            R_wc = Rotation.from_quat(vals[4:8]).as_matrix()
            stamps.append(vals[0])
            poses.append(PoseSE3.from_camera_center(R_wc, vals[1:4]))
    return Trajectory(np.array(stamps), poses)


def associate(stamps_a, stamps_b, max_diff=ASSOCIATION_WINDOW):
    """Nearest-neighbour timestamp pairs ``(i, j)`` within ``max_diff``, one-to-one."""
    stamps_a = np.asarray(stamps_a, float)
    stamps_b = np.asarray(stamps_b, float)
    if len(stamps_b) == 0:
        return np.zeros((0, 2), dtype=int)
    pos = np.searchsorted(stamps_b, stamps_a)
    pairs, used = [], set()
    for i, p in enumerate(pos):
        cands = [j for j in (p - 1, p) if 0 <= j < len(stamps_b)]
        j = min(cands, key=lambda j: abs(stamps_b[j] - stamps_a[i]))
        if abs(stamps_b[j] - stamps_a[i]) <= max_diff and j not in used:
            used.add(j)
            pairs.append((i, j))
    return np.array(pairs, dtype=int).reshape(-1, 2)


def align_rigid(src, dst):
    """Least-squares ``R, t`` with ``R @ src + t ≈ dst`` (Umeyama without scale)."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


@dataclass
class ATEResult:
    rmse: float
    errors: np.ndarray       # per associated frame, meters
    timestamps: np.ndarray   # estimate timestamps of the associated frames
    rotation: np.ndarray
    translation: np.ndarray


def evaluate_ate(estimate, ground_truth, max_diff=ASSOCIATION_WINDOW):
    """Translational RMSE after rigid alignment of associated camera positions."""
    pairs = associate(estimate.timestamps, ground_truth.timestamps, max_diff)
    if len(pairs) < 2:
        raise ValueError("fewer than two associated timestamps")
    est = estimate.positions[pairs[:, 0]]
    gt = ground_truth.positions[pairs[:, 1]]
    R, t = align_rigid(est, gt)
    err = np.linalg.norm(est @ R.T + t - gt, axis=1)
    return ATEResult(float(np.sqrt(np.mean(err ** 2))), err,
                     estimate.timestamps[pairs[:, 0]], R, t)


def error_curve(errors, n_samples=101):
    """Cumulative proportion of errors at or below evenly spaced thresholds."""
    errors = np.sort(np.asarray(errors, float))
    if len(errors) == 0:
        return np.zeros(0), np.zeros(0)
    thresholds = np.linspace(0.0, errors[-1], n_samples)
    prop = np.searchsorted(errors, thresholds, side="right") / len(errors)
    return thresholds, prop


def emit_report(result, out_dir, timings=None, prefix=""):
    """Write per-frame errors, the cumulative error curve and (optionally) stage timings.

    ``result`` may be None for a header-only error file. Timing goes to its own
    file so that the other outputs stay reproducible byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    errors = np.zeros(0) if result is None else result.errors
    stamps = np.zeros(0) if result is None else result.timestamps
    paths = {"errors": out / f"{prefix}errors.csv", "curve": out / f"{prefix}error_curve.csv"}
    with open(paths["errors"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp", "translation_error_m"])
        for ts, e in zip(stamps, errors):
            w.writerow([f"{ts:.6f}", f"{e:.12g}"])
    thresholds, prop = error_curve(errors)
    with open(paths["curve"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_m", "proportion"])
        for th, p in zip(thresholds, prop):
            w.writerow([f"{th:.12g}", f"{p:.12g}"])
    if timings is not None:
        paths["timing"] = out / f"{prefix}timing.csv"
        with open(paths["timing"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["stage", "seconds"])
            for stage, sec in timings.items():
                w.writerow([stage, f"{sec:.6f}"])
    return paths
