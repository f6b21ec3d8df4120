"""Precomputed-feature directories for running on real stereo sequences.

Layout::

    rig.json               fx, fy, cx, cy, width, height, baseline
    frames/000000.json     one file per frame, sorted by name
    groundtruth.txt        optional TUM trajectory

A frame file holds ``timestamp``, ``keypoints``, ``keypoints_right``,
``stereo_matches`` (pairs of left/right keypoint indices), ``segments`` and
``segments_right`` (rows ``x1 y1 x2 y2``) and ``track_ids``, one integer per
left keypoint. Keypoints sharing a non-negative track id across two frames
are treated as matched, which is how an external detector/matcher hands its
correspondences over.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import DegenerateGeometryError, PinholeIntrinsics, StereoRig, segment_from_endpoints
from .synthetic import FrontendOutput


def _segments(rows):
    out = []
    for r in rows:
        try:
            out.append(segment_from_endpoints(r[:2], r[2:4]))
        except DegenerateGeometryError:
            continue
    return out


def load_rig(path):
    with open(path) as f:
        d = json.load(f)
    K = PinholeIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"])
    return StereoRig(K, d["baseline"])


class FeatureFileProvider:
    """Feature provider reading a precomputed-feature directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.rig = load_rig(self.root / "rig.json")
        self.files = sorted((self.root / "frames").glob("*.json"))
        if not self.files:
            raise FileNotFoundError(f"no frame files under {self.root / 'frames'}")
        self._tracks = {}

    def __len__(self):
        return len(self.files)

    def frame(self, index):
        with open(self.files[index]) as f:
            d = json.load(f)
        kp = np.asarray(d["keypoints"], float).reshape(-1, 2)
        tracks = np.asarray(d.get("track_ids", [-1] * len(kp)), int)
        if len(tracks) != len(kp):
            raise ValueError(f"{self.files[index].name}: one track id per keypoint")
        self._tracks[index] = tracks
        return FrontendOutput(
            index, float(d["timestamp"]), kp,
            np.asarray(d.get("keypoints_right", []), float).reshape(-1, 2),
            np.asarray(d.get("stereo_matches", []), int).reshape(-1, 2),
            _segments(d.get("segments", [])), _segments(d.get("segments_right", [])))

    def match(self, a, b):
        ta, tb = self._tracks[a.frame_index], self._tracks[b.frame_index]
        pos_b = {int(t): k for k, t in enumerate(tb) if t >= 0}
        return np.array([(i, pos_b[int(t)]) for i, t in enumerate(ta) if int(t) in pos_b],
                        dtype=int).reshape(-1, 2)

    @property
    def ground_truth_path(self):
        p = self.root / "groundtruth.txt"
        return p if p.exists() else None


def write_feature_dir(root, rig, frames, track_ids):
    """Write frontend outputs (and their track ids) in the directory layout above."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    K = rig.intrinsics
    with open(root / "rig.json", "w") as f:
        json.dump({"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.image_width,
                   "height": K.image_height, "baseline": rig.baseline}, f, indent=1)
    for out, tracks in zip(frames, track_ids):
        d = {
            "timestamp": out.timestamp,
            "keypoints": out.keypoints.tolist(),
            "keypoints_right": out.keypoints_right.tolist(),
            "stereo_matches": out.stereo_matches.tolist(),
            "segments": [[*s.p1.tolist(), *s.p2.tolist()] for s in out.segments],
            "segments_right": [[*s.p1.tolist(), *s.p2.tolist()] for s in out.segments_right],
            "track_ids": np.asarray(tracks, int).tolist(),
        }
        with open(root / "frames" / f"{out.frame_index:06d}.json", "w") as f:
            json.dump(d, f)
