"""Deterministic synthetic stereo scenes and a feature-level renderer.

The renderer stands in for a learned keypoint detector/matcher and a
segment detector: it emits pixel keypoints, image segments and stereo
correspondences, with configurable noise, dropout, segment fragmentation
and match corruption. Ground-truth landmark identities travel in a
separate channel that only tests and auditors read.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .geometry import (
    DegenerateGeometryError,
    PinholeIntrinsics,
    PoseSE3,
    StereoRig,
    segment_from_endpoints,
)

NEAR_PLANE = 0.1
MIN_RENDERED_LENGTH = 10.0


@dataclass(frozen=True)
class SceneConfig:
    preset: str = "circle"          # "circle" or "corridor"
    n_points: int = 1500            # free landmarks
    n_lines: int = 160
    points_per_line: int = 8        # landmarks sampled on every line
    line_separation: float = 0.25   # min gap (m) between parallel lines on one wall
    n_frames: int = 100
    rate: float = 10.0              # Hz
    room: tuple = (8.0, 8.0, 3.0)   # circle: x, y, z extent; corridor: length, width, height
    radius: float = 1.2             # circle radius (m)
    camera_height: float = 1.5
    clearance: float = 1.0          # free landmarks keep this distance from the path
    fx: float = 420.0
    fy: float = 420.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    baseline: float = 0.12
    max_points: int = 200           # per-frame keypoint budget
    max_lines: int = 40             # per-frame segment budget

    def __post_init__(self):
        if self.preset not in ("circle", "corridor"):
            raise ValueError(f"unknown preset {self.preset!r}")
        for name in ("n_frames", "rate", "max_points"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_points", "n_lines", "points_per_line", "max_lines"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def rig(self):
        K = PinholeIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
        return StereoRig(K, self.baseline)


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.0
    endpoint_sigma: float = 0.0
    detection_dropout: float = 0.0
    segment_split_prob: float = 0.0
    match_corruption: float = 0.0

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.endpoint_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        for name in ("detection_dropout", "segment_split_prob", "match_corruption"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


@dataclass
class SyntheticScene:
    landmarks: np.ndarray        # (N, 3)
    landmark_line: np.ndarray    # (N,) index of the line a landmark lies on, or -1
    gt_lines: np.ndarray         # (M, 2, 3) segment endpoints
    timestamps: np.ndarray       # (F,)
    poses: list                  # world-to-camera PoseSE3 per frame
    rig: StereoRig
    rng_seed: int
    config: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if len(self.gt_lines) and np.any(
                np.linalg.norm(self.gt_lines[:, 0] - self.gt_lines[:, 1], axis=1) == 0):
            raise ValueError("ground-truth lines need distinct endpoints")

    def to_dict(self):
        return {
            "rng_seed": self.rng_seed,
            "config": asdict(self.config),
            "landmarks": self.landmarks.tolist(),
            "landmark_line": self.landmark_line.tolist(),
            "gt_lines": self.gt_lines.tolist(),
            "timestamps": self.timestamps.tolist(),
            "poses": [{"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
                      for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d):
        cfg = d["config"]
        cfg["room"] = tuple(cfg["room"])
        config = SceneConfig(**cfg)
        return cls(
            landmarks=np.array(d["landmarks"], dtype=float).reshape(-1, 3),
            landmark_line=np.array(d["landmark_line"], dtype=int),
            gt_lines=np.array(d["gt_lines"], dtype=float).reshape(-1, 2, 3),
            timestamps=np.array(d["timestamps"], dtype=float),
            poses=[PoseSE3(p["rotation"], p["translation"]) for p in d["poses"]],
            rig=config.rig, rng_seed=int(d["rng_seed"]), config=config)


def save_scene(scene, path):
    with open(path, "w") as f:
        json.dump(scene.to_dict(), f)
        f.write("\n")


def load_scene(path):
    with open(path) as f:
        return SyntheticScene.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Scene generation

def _look_rotation(forward, up=(0.0, 0.0, 1.0)):
    """Camera-to-world rotation with optical axis ``forward`` and image-down opposite ``up``."""
    f = np.asarray(forward, float)
    f = f / np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.column_stack([right, down, f])


def _circle_trajectory(cfg):
    poses = []
    for i in range(cfg.n_frames):
        th = 2.0 * np.pi * i / cfg.n_frames
        center = np.array([cfg.radius * np.cos(th), cfg.radius * np.sin(th),
                           cfg.camera_height + 0.1 * np.sin(2.0 * th)])
        yaw = th + 0.2 * np.sin(th)
        pitch = 0.05 * np.sin(3.0 * th)
        fwd = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
        poses.append(PoseSE3.from_camera_center(_look_rotation(fwd), center))
    return poses


def _corridor_trajectory(cfg):
    length = cfg.room[0]
    travel = 0.6 * length
    poses = []
    for i in range(cfg.n_frames):
        s = i / max(cfg.n_frames - 1, 1)
        x = -0.5 * travel + travel * s
        center = np.array([x, 0.2 * np.sin(2.0 * np.pi * s), cfg.camera_height])
        yaw = 0.25 * np.sin(4.0 * np.pi * s)  # stays well inside 30 deg
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        poses.append(PoseSE3.from_camera_center(_look_rotation(fwd), center))
    return poses


def _room_box(cfg):
    if cfg.preset == "circle":
        lx, ly, lz = cfg.room
        return np.array([-lx / 2, -ly / 2, 0.0]), np.array([lx / 2, ly / 2, lz])
    length, width, h = cfg.room
    return np.array([-length / 2, -width / 2, 0.0]), np.array([length / 2, width / 2, h])


def _free_points(cfg, rng, lo, hi, centers):
    pts = []
    while len(pts) < cfg.n_points:
        cand = rng.uniform(lo, hi, size=(max(64, 2 * cfg.n_points), 3))
        if cfg.preset == "circle":
            ok = np.hypot(cand[:, 0], cand[:, 1]) >= cfg.radius + cfg.clearance
        else:
            d = np.linalg.norm(cand[:, None, :2] - centers[None, ::4, :2], axis=2).min(axis=1)
            ok = d >= cfg.clearance
        pts.extend(cand[ok][: cfg.n_points - len(pts)])
    return np.array(pts).reshape(-1, 3)


def _too_close(a, b, lines, sep):
    """True if ``a-b`` runs parallel to an accepted line on the same wall within ``sep``."""
    d = b - a
    along = int(np.argmax(np.abs(d)))
    for c, e in lines:
        f = e - c
        if int(np.argmax(np.abs(f))) != along or np.abs(a - c)[np.abs(d) == 0].max() >= sep:
            continue
        lo1, hi1 = sorted((a[along], b[along]))
        lo2, hi2 = sorted((c[along], e[along]))
        if lo1 < hi2 + sep and lo2 < hi1 + sep:
            return True
    return False


def _wall_lines(cfg, rng, lo, hi, max_tries=200):
    """Axis-aligned segments lying on the vertical walls of the box.

    Parallel lines on one wall keep ``cfg.line_separation`` apart so that
    distinct lines are not nearly collinear in every view.
    """
    lines = []
    walls = [(0, lo[0]), (0, hi[0]), (1, lo[1]), (1, hi[1])]
    if cfg.preset == "corridor":
        walls = walls[2:]  # the side walls carry the structure
    for _ in range(cfg.n_lines):
        for _ in range(max_tries):
            axis, value = walls[rng.integers(len(walls))]
            other = 1 - axis
            if rng.random() < 0.5:  # vertical
                length = rng.uniform(0.8, hi[2] - lo[2] - 0.2)
                z0 = rng.uniform(lo[2] + 0.1, hi[2] - 0.1 - length)
                s = rng.uniform(lo[other] + 0.2, hi[other] - 0.2)
                a = np.empty(3)
                a[axis], a[other], a[2] = value, s, z0
                b = a.copy()
                b[2] = z0 + length
            else:
                length = rng.uniform(0.6, 2.0)
                s0 = rng.uniform(lo[other] + 0.2, hi[other] - 0.2 - length)
                z = rng.uniform(lo[2] + 0.2, hi[2] - 0.2)
                a = np.empty(3)
                a[axis], a[other], a[2] = value, s0, z
                b = a.copy()
                b[other] = s0 + length
            if not _too_close(a, b, lines, cfg.line_separation):
                lines.append((a, b))
                break
        else:
            raise ValueError("cannot place lines at the requested separation; "
                             "lower n_lines or line_separation")
    return np.array(lines).reshape(-1, 2, 3)


def generate_scene(config=SceneConfig(), seed=0):
    """Landmarks, wall-aligned lines and a smooth trajectory, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    poses = _circle_trajectory(config) if config.preset == "circle" else _corridor_trajectory(config)
    centers = np.array([p.center for p in poses])
    lo, hi = _room_box(config)
    free = _free_points(config, rng, lo, hi, centers)
    lines = _wall_lines(config, rng, lo, hi)
    on_line, on_line_id = [], []
    for j, (a, b) in enumerate(lines):
        s = rng.uniform(0.05, 0.95, size=config.points_per_line)
        on_line.append(a[None] + s[:, None] * (b - a)[None])
        on_line_id.extend([j] * config.points_per_line)
    landmarks = np.vstack([free] + on_line) if on_line else free
    landmark_line = np.concatenate([np.full(len(free), -1), np.array(on_line_id, dtype=int)])
    timestamps = np.arange(config.n_frames) / config.rate
    return SyntheticScene(landmarks, landmark_line.astype(int), lines, timestamps, poses,
                          config.rig, int(seed), config)


# ---------------------------------------------------------------------------
# Rendering

@dataclass
class GroundTruthChannel:
    """Hidden identities; the pipeline never reads this."""

    point_ids: np.ndarray
    point_ids_right: np.ndarray
    segment_ids: np.ndarray
    segment_ids_right: np.ndarray


@dataclass
class FrontendOutput:
    frame_index: int
    timestamp: float
    keypoints: np.ndarray           # (N, 2) left image
    keypoints_right: np.ndarray     # (M, 2)
    stereo_matches: np.ndarray      # (K, 2) left index, right index
    segments: list
    segments_right: list
    gt: GroundTruthChannel | None = None


class FeatureProvider(Protocol):
    """Anything that yields per-frame features and matches keypoints between two frames."""

    def __len__(self) -> int: ...

    def frame(self, index: int) -> FrontendOutput: ...

    def match(self, a: FrontendOutput, b: FrontendOutput) -> np.ndarray: ...


def _clip_segment_2d(p, q, w, h):
    """Liang-Barsky clip of segment ``p-q`` to ``[0, w] x [0, h]``; None if outside."""
    d = q - p
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-d[0], p[0]), (d[0], w - p[0]), (-d[1], p[1]), (d[1], h - p[1])):
        if pk == 0:
            if qk < 0:
                return None
            continue
        r = qk / pk
        if pk < 0:
            t0 = max(t0, r)
        else:
            t1 = min(t1, r)
        if t0 > t1:
            return None
    return p + t0 * d, p + t1 * d


def _project_segment(pose, K, A, B):
    """Visible image segment of 3D segment ``A-B`` or None."""
    a, b = pose.apply(A), pose.apply(B)
    if a[2] < NEAR_PLANE and b[2] < NEAR_PLANE:
        return None
    if a[2] < NEAR_PLANE or b[2] < NEAR_PLANE:
        s = (NEAR_PLANE - a[2]) / (b[2] - a[2])
        m = a + s * (b - a)
        a, b = (m, b) if a[2] < NEAR_PLANE else (a, m)
    uv = K.project(np.stack([a, b]))
    clipped = _clip_segment_2d(uv[0], uv[1], K.image_width, K.image_height)
    if clipped is None:
        return None
    p, q = clipped
    if np.linalg.norm(q - p) < MIN_RENDERED_LENGTH:
        return None
    return p, q


def _render_points(scene, pose, priority, budget, noise, rng):
    K = scene.rig.intrinsics
    Xc = pose.apply(scene.landmarks)
    front = Xc[:, 2] > NEAR_PLANE
    uv = np.full((len(Xc), 2), np.nan)
    uv[front] = K.project(Xc[front])
    vis = front & K.in_image(uv)
    ids = np.nonzero(vis)[0]
    ids = ids[np.argsort(priority[ids], kind="stable")][:budget]
    keep = rng.random(len(ids)) >= noise.detection_dropout
    ids = ids[keep]
    pts = uv[ids] + rng.normal(0.0, 1.0, (len(ids), 2)) * noise.pixel_sigma
    inside = K.in_image(pts)
    return ids[inside], pts[inside]


def _render_segments(scene, pose, priority, budget, noise, rng):
    K = scene.rig.intrinsics
    cand = []
    for j, (A, B) in enumerate(scene.gt_lines):
        seg = _project_segment(pose, K, A, B)
        if seg is not None:
            cand.append((priority[j], j, seg))
    cand.sort(key=lambda c: c[0])
    segs, ids = [], []
    for _, j, (p, q) in cand[:budget]:
        if rng.random() < noise.detection_dropout:
            continue
        pieces = [(p, q)]
        if rng.random() < noise.segment_split_prob:
            d = q - p
            L = np.linalg.norm(d)
            f = rng.uniform(0.3, 0.7)
            gap = min(rng.uniform(1.0, 5.0), 0.2 * L)
            u = d / L
            m = p + f * d
            pieces = [(p, m - 0.5 * gap * u), (m + 0.5 * gap * u, q)]
        for a, b in pieces:
            a = a + rng.normal(0.0, 1.0, 2) * noise.endpoint_sigma
            b = b + rng.normal(0.0, 1.0, 2) * noise.endpoint_sigma
            clipped = _clip_segment_2d(a, b, K.image_width, K.image_height)
            if clipped is None:
                continue
            try:
                segs.append(segment_from_endpoints(*clipped))
            except DegenerateGeometryError:
                continue
            ids.append(j)
    return segs, np.array(ids, dtype=int)


def _priorities(scene):
    rng = np.random.default_rng([scene.rng_seed, 7])
    return rng.permutation(len(scene.landmarks)), rng.permutation(len(scene.gt_lines))


def render_frame(scene, frame_index, noise=NoiseModel(), seed=0, priorities=None):
    """Stereo features of one frame; randomness is keyed on ``(seed, frame_index)``."""
    if not 0 <= frame_index < len(scene.poses):
        raise IndexError(f"frame {frame_index} out of range")
    cfg = scene.config
    rng = np.random.default_rng([int(seed), int(frame_index)])
    pt_prio, ln_prio = priorities if priorities is not None else _priorities(scene)
    left = scene.poses[frame_index]
    right = scene.rig.right_pose(left)
    ids_l, kp_l = _render_points(scene, left, pt_prio, cfg.max_points, noise, rng)
    ids_r, kp_r = _render_points(scene, right, pt_prio, len(scene.landmarks), noise, rng)
    # right features exist only where the left detector fired
    in_left = np.isin(ids_r, ids_l)
    ids_r, kp_r = ids_r[in_left], kp_r[in_left]
    pos_r = {int(p): k for k, p in enumerate(ids_r)}
    stereo = np.array([(i, pos_r[int(p)]) for i, p in enumerate(ids_l) if int(p) in pos_r],
                      dtype=int).reshape(-1, 2)
    segs_l, sid_l = _render_segments(scene, left, ln_prio, cfg.max_lines, noise, rng)
    segs_r, sid_r = _render_segments(scene, right, ln_prio, cfg.max_lines, noise, rng)
    gt = GroundTruthChannel(ids_l, ids_r, sid_l, sid_r)
    return FrontendOutput(frame_index, float(scene.timestamps[frame_index]), kp_l, kp_r,
                          stereo, segs_l, segs_r, gt)


def oracle_match(out_a, out_b, corruption=0.0, seed=0):
    """Injective keypoint matches ``(index_a, index_b)`` by ground-truth identity.

    Each true match is rewired with probability ``corruption`` to a random
    wrong partner in ``out_b``.
    """
    rng = np.random.default_rng([int(seed), int(out_a.frame_index), int(out_b.frame_index), 1])
    pos_b = {int(p): k for k, p in enumerate(out_b.gt.point_ids)}
    pairs = np.array([(i, pos_b[int(p)]) for i, p in enumerate(out_a.gt.point_ids)
                      if int(p) in pos_b], dtype=int).reshape(-1, 2)
    if corruption <= 0.0 or len(pairs) == 0:
        return pairs
    bad = np.nonzero(rng.random(len(pairs)) < corruption)[0]
    if len(bad) == 0:
        return pairs
    n_b = len(out_b.keypoints)
    used = set(pairs[:, 1].tolist())
    free = [k for k in range(n_b) if k not in used]
    if len(bad) >= 2:
        # a cyclic shift of a random ordering moves every corrupted partner
        order = rng.permutation(bad)
        targets = pairs[order, 1].copy()
        pairs[order, 1] = np.roll(targets, 1)
    elif free:
        pairs[bad[0], 1] = free[rng.integers(len(free))]
    else:
        pairs = np.delete(pairs, bad, axis=0)
    return pairs


class SyntheticFrontend:
    """:class:`FeatureProvider` backed by a synthetic scene."""

    def __init__(self, scene, noise=NoiseModel(), seed=0):
        self.scene = scene
        self.noise = noise
        self.seed = int(seed)
        self._priorities = _priorities(scene)

    def __len__(self):
        return len(self.scene.poses)

    def frame(self, index):
        return render_frame(self.scene, index, self.noise, self.seed, self._priorities)

    def match(self, a, b):
        return oracle_match(a, b, self.noise.match_corruption, self.seed)
