"""Frames, keyframes, landmarks, the co-visibility graph and keyframe selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geometry import PluckerLine, PoseSE3, rotation_angle
from .line2d import PointLineAssociation


class MapError(RuntimeError):
    pass


@dataclass
class Frame:
    """Per-image feature bundle and pose estimate.

    ``point_ids[i]`` / ``line_ids[j]`` link keypoint ``i`` / segment ``j`` to a
    map landmark id, or -1. Right-image data is only filled for keyframes:
    ``keypoints_right`` holds NaN where a keypoint has no stereo partner and
    ``stereo_line_matches`` maps left segment index to right segment index.
    """

    id: int
    timestamp: float
    pose: PoseSE3
    keypoints: np.ndarray
    segments: list = field(default_factory=list)
    associations: PointLineAssociation = field(default_factory=PointLineAssociation)
    point_ids: np.ndarray = None
    line_ids: np.ndarray = None
    keypoints_right: np.ndarray = None
    segments_right: list = field(default_factory=list)
    stereo_line_matches: dict = field(default_factory=dict)
    tracked_map_point_count: int = 0
    features: object = None  # frontend output, handed back to the matcher

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=float).reshape(-1, 2)
        if self.point_ids is None:
            self.point_ids = np.full(len(self.keypoints), -1, dtype=int)
        if self.line_ids is None:
            self.line_ids = np.full(len(self.segments), -1, dtype=int)
        if self.keypoints_right is None:
            self.keypoints_right = np.full_like(self.keypoints, np.nan)
        if len(self.point_ids) != len(self.keypoints) or len(self.line_ids) != len(self.segments):
            raise ValueError("landmark id arrays must match feature counts")


@dataclass
class MapPoint:
    position: np.ndarray
    observations: list = field(default_factory=list)  # (keyframe id, keypoint index)
    created_at: int = 0  # keyframe count when created

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.position)):
            raise ValueError("map point position must be finite")


@dataclass
class MapLine:
    line: PluckerLine
    endpoints: tuple
    observations: list = field(default_factory=list)  # (keyframe id, segment index)
    created_at: int = 0


@dataclass(frozen=True)
class KeyframeThresholds:
    min_distance: float = 0.3             # delta_d^kf, meters
    min_angle: float = np.deg2rad(15.0)   # delta_theta^kf, radians
    low_track: int = 60                   # N_1^kf
    critical_track: int = 20              # N_2^kf
    window: int = 5                       # N_kf^go

    def __post_init__(self):
        if not (self.min_distance > 0 and self.min_angle > 0 and self.window > 0
                and self.critical_track > 0):
            raise ValueError("keyframe thresholds must be positive")
        if not self.critical_track < self.low_track:
            raise ValueError("critical_track (N2) must be below low_track (N1)")


class KeyframeDecision(NamedTuple):
    is_keyframe: bool
    rule: str | None


RULES = ("distance", "angle", "low_track", "recovered")


def keyframe_decision(frame, last_kf, prev_frame, th):
    """Apply the four keyframe rules in order; report the first that fires."""
    d = np.linalg.norm(frame.pose.center - last_kf.pose.center)
    if d > th.min_distance:
        return KeyframeDecision(True, "distance")
    angle = rotation_angle(frame.pose.rotation @ last_kf.pose.rotation.T)
    if angle > th.min_angle:
        return KeyframeDecision(True, "angle")
    tracked = frame.tracked_map_point_count
    if th.critical_track < tracked < th.low_track:
        return KeyframeDecision(True, "low_track")
    if tracked > th.critical_track and prev_frame.tracked_map_point_count < th.critical_track:
        return KeyframeDecision(True, "recovered")
    return KeyframeDecision(False, None)


class Map:
    """Keyframes plus landmark tables with bidirectional observation links."""

    def __init__(self):
        self.keyframes = {}
        self.points = {}
        self.lines = {}
        self._next_point = 0
        self._next_line = 0

    # -- construction -----------------------------------------------------
    def add_keyframe(self, frame):
        if frame.id in self.keyframes:
            raise MapError(f"keyframe id {frame.id} already present")
        if self.keyframes and frame.id < max(self.keyframes):
            raise MapError("keyframe ids must increase")
        self.keyframes[frame.id] = frame

    def create_point(self, position, kf_id, index):
        pid = self._next_point
        self._next_point += 1
        self.points[pid] = MapPoint(position, created_at=len(self.keyframes))
        self.insert_point_observation(pid, kf_id, index)
        return pid

    def create_line(self, line, endpoints, kf_id, index):
        lid = self._next_line
        self._next_line += 1
        self.lines[lid] = MapLine(line, tuple(np.asarray(e, float) for e in endpoints),
                                  created_at=len(self.keyframes))
        self.insert_line_observation(lid, kf_id, index)
        return lid

    def insert_point_observation(self, pid, kf_id, index):
        kf = self.keyframes[kf_id]
        if kf.point_ids[index] not in (-1, pid):
            raise MapError(f"keypoint {index} of keyframe {kf_id} already linked")
        mp = self.points[pid]
        if any(k == kf_id for k, _ in mp.observations):
            raise MapError(f"point {pid} already observed by keyframe {kf_id}")
        mp.observations.append((kf_id, int(index)))
        kf.point_ids[index] = pid

    def insert_line_observation(self, lid, kf_id, index):
        kf = self.keyframes[kf_id]
        if kf.line_ids[index] not in (-1, lid):
            raise MapError(f"segment {index} of keyframe {kf_id} already linked")
        ml = self.lines[lid]
        if any(k == kf_id for k, _ in ml.observations):
            raise MapError(f"line {lid} already observed by keyframe {kf_id}")
        ml.observations.append((kf_id, int(index)))
        kf.line_ids[index] = lid

    def remove_point(self, pid):
        for kf_id, idx in self.points.pop(pid).observations:
            self.keyframes[kf_id].point_ids[idx] = -1

    def remove_line(self, lid):
        for kf_id, idx in self.lines.pop(lid).observations:
            self.keyframes[kf_id].line_ids[idx] = -1

    def remove_point_observation(self, pid, kf_id):
        mp = self.points[pid]
        for k, idx in mp.observations:
            if k == kf_id:
                self.keyframes[k].point_ids[idx] = -1
        mp.observations = [(k, i) for k, i in mp.observations if k != kf_id]
        if not mp.observations:
            del self.points[pid]

    def remove_line_observation(self, lid, kf_id):
        ml = self.lines[lid]
        for k, idx in ml.observations:
            if k == kf_id:
                self.keyframes[k].line_ids[idx] = -1
        ml.observations = [(k, i) for k, i in ml.observations if k != kf_id]
        if not ml.observations:
            del self.lines[lid]

    def cull_landmarks(self, opportunities=3):
        """Drop landmarks seen by fewer than two keyframes once ``opportunities`` more have passed."""
        n_kf = len(self.keyframes)
        culled = 0
        for table, remove in ((self.points, self.remove_point), (self.lines, self.remove_line)):
            for lid in [i for i, lm in table.items()
                        if n_kf - lm.created_at > opportunities and len(lm.observations) < 2]:
                remove(lid)
                culled += 1
        return culled

    # -- co-visibility ----------------------------------------------------
    def covisibility(self, kf_id):
        """Shared landmark observation counts between ``kf_id`` and every other keyframe."""
        kf = self.keyframes[kf_id]
        counts = {}
        for ids, table in ((kf.point_ids, self.points), (kf.line_ids, self.lines)):
            for lid in ids[ids >= 0]:
                for other, _ in table[int(lid)].observations:
                    if other != kf_id:
                        counts[other] = counts.get(other, 0) + 1
        return counts

    def covisibility_window(self, kf_id, size):
        """Current keyframe plus the best-connected others, padded by recency.

        Returned ordered oldest to newest.
        """
        if not self.keyframes:
            raise MapError("map is empty")
        counts = self.covisibility(kf_id)
        others = [k for k in self.keyframes if k != kf_id]
        ranked = sorted(others, key=lambda k: (-counts.get(k, 0), -k))
        chosen = [kf_id] + ranked[:max(0, size - 1)]
        return sorted(chosen)

    # -- auditing and export ----------------------------------------------
    def audit(self):
        """Full bidirectional consistency scan; raises :class:`MapError` on the first problem."""
        for table, attr, name in ((self.points, "point_ids", "point"),
                                  (self.lines, "line_ids", "line")):
            for lid, lm in table.items():
                if not lm.observations:
                    raise MapError(f"{name} {lid} has no observations")
                for kf_id, idx in lm.observations:
                    if kf_id not in self.keyframes:
                        raise MapError(f"{name} {lid} references missing keyframe {kf_id}")
                    ids = getattr(self.keyframes[kf_id], attr)
                    if not 0 <= idx < len(ids) or ids[idx] != lid:
                        raise MapError(f"{name} {lid} observation ({kf_id}, {idx}) not mirrored")
            for kf_id, kf in self.keyframes.items():
                for idx, lid in enumerate(getattr(kf, attr)):
                    if lid < 0:
                        continue
                    if lid not in table or (kf_id, idx) not in table[lid].observations:
                        raise MapError(f"keyframe {kf_id} {name} {idx} -> {lid} not mirrored")
        for pid, mp in self.points.items():
            if not np.all(np.isfinite(mp.position)):
                raise MapError(f"point {pid} is not finite")

    def to_dict(self):
        def pose_dict(p):
            return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}

        return {
            "keyframes": [
                {"id": kf.id, "timestamp": kf.timestamp, "pose": pose_dict(kf.pose),
                 "num_keypoints": int(len(kf.keypoints)), "num_segments": len(kf.segments)}
                for kf in self.keyframes.values()],
            "points": [
                {"id": pid, "position": mp.position.tolist(),
                 "observations": [list(o) for o in mp.observations]}
                for pid, mp in self.points.items()],
            "lines": [
                {"id": lid, "n": ml.line.n.tolist(), "v": ml.line.v.tolist(),
                 "endpoints": [np.asarray(e).tolist() for e in ml.endpoints],
                 "observations": [list(o) for o in ml.observations]}
                for lid, ml in self.lines.items()],
        }

    def dump_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")
