"""Frame-by-frame stereo point-line odometry over a feature provider.

Stages per frame: line merge/filter and point-line association, matching
against the last keyframe (points, then lines through shared points),
robust pose estimation, the keyframe decision and, for keyframes, stereo
landmark initialization followed by local bundle adjustment.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import FeatureFileProvider
from .evaluation import Trajectory, emit_report, evaluate_ate, load_tum, save_tum
from .geometry import DegenerateGeometryError, PoseSE3
from .line2d import associate_points_to_lines, filter_short, match_lines, merge_segments
from .mapping import Frame, Map, keyframe_decision
from .optimizer import (
    TrackingFailure,
    initial_pose_estimate,
    line_residuals,
    local_bundle_adjustment,
    reject_window_outliers,
    write_cost_log,
)
from .synthetic import FrontendOutput, SyntheticFrontend, generate_scene, load_scene
from .triangulation import (
    TriangulationError,
    back_project_plane,
    plane_angle,
    select_points_for_line,
    triangulate_line_from_points,
    triangulate_line_two_planes,
    triangulate_point_stereo,
    trim_endpoints,
)

log = logging.getLogger(__name__)

MIN_DISPARITY = 1.0            # px; closer to infinity than this is not triangulated
MAX_LINE_INIT_RESIDUAL = 5.0   # px; new lines must reproject this well into every view


class StageTimer:
    """Accumulated seconds per stage; a stage opened inside another is keyed ``outer/inner``."""

    def __init__(self):
        self.totals = {}
        self._stack = []

    @contextmanager
    def __call__(self, stage):
        self._stack.append(stage)
        name = "/".join(self._stack)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.totals[name] = self.totals.get(name, 0.0) + time.perf_counter() - t0
            self._stack.pop()


@dataclass
class PreparedFrame:
    features: FrontendOutput
    segments: list
    associations: dict


@dataclass
class FrameRecord:
    index: int
    timestamp: float
    pose: PoseSE3
    is_keyframe: bool
    rule: str | None
    tracked: int
    failed: bool = False


@dataclass
class PipelineResult:
    trajectory: Trajectory
    map: Map
    records: list
    ground_truth: Trajectory | None = None
    ate: object = None
    timings: dict = field(default_factory=dict)
    ba_history: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def keyframe_ids(self):
        return [r.index for r in self.records if r.is_keyframe]

    @property
    def attributed_time(self):
        """Seconds spent in top-level stages of the calling thread."""
        return sum(v for k, v in self.timings.items()
                   if "/" not in k and not k.startswith("producer_"))

    @property
    def failures(self):
        return [r.index for r in self.records if r.failed]

    def metrics(self):
        return {
            "ate_rmse_m": None if self.ate is None else self.ate.rmse,
            "frames": len(self.records),
            "keyframes": len(self.keyframe_ids),
            "tracking_failures": self.failures,
            "map_points": len(self.map.points),
            "map_lines": len(self.map.lines),
            "keyframe_rules": {r.index: r.rule for r in self.records if r.is_keyframe},
        }


def prepare_frame(features, cfg):
    """Line post-processing and point-line association for the left image."""
    segments, assoc = [], {}
    if cfg.use_lines:
        segments = filter_short(merge_segments(features.segments, cfg.merge), cfg.merge.min_length)
        assoc = associate_points_to_lines(features.keypoints, segments, cfg.match.assoc_max_dist)
    return PreparedFrame(features, segments, assoc)


class VisualOdometry:
    """Backend state machine; feed it prepared frames in order."""

    def __init__(self, rig, cfg=RunConfig(), matcher=None, audit=False, timer=None):
        self.rig = rig
        self.K = rig.intrinsics
        self.cfg = cfg
        self.matcher = matcher
        self.audit = audit
        self.timer = timer or StageTimer()
        self.map = Map()
        self.last_kf = None
        self.prev_frame = None
        self.records = []
        self.ba_history = []

    # -- per frame ----------------------------------------------------------
    def process(self, prep):
        cfg, timer = self.cfg, self.timer
        f = prep.features
        frame = Frame(f.frame_index, f.timestamp, PoseSE3(), f.keypoints,
                      prep.segments, prep.associations, features=f)
        if self.last_kf is None:
            with timer("keyframe_insertion"):
                self._insert_keyframe(frame, [])
            return self._record(frame, True, "initial")

        with timer("matching"):
            matches = np.asarray(self.matcher(self.last_kf.features, f), dtype=int).reshape(-1, 2)
            kf_ids = self.last_kf.point_ids
            for a, b in matches:
                pid = kf_ids[a]
                if pid >= 0:
                    frame.point_ids[b] = pid
            line_matches = []
            if cfg.use_lines and frame.segments:
                line_matches = match_lines(self.last_kf.associations, frame.associations,
                                           matches, cfg.match)
        with timer("pose_estimation"):
            try:
                initial_pose_estimate(frame, self.map, self.prev_frame.pose, self.K, cfg.optimizer)
            except TrackingFailure as exc:
                log.info("frame %d: tracking failure (%s)", frame.id, exc)
                frame.pose = self.prev_frame.pose
                frame.point_ids[:] = -1
                frame.tracked_map_point_count = 0
                return self._record(frame, False, None, failed=True)
        for m, n, _ in line_matches:
            lid = self.last_kf.line_ids[m]
            if lid >= 0:
                frame.line_ids[n] = lid
        with timer("keyframe_decision"):
            decision = keyframe_decision(frame, self.last_kf, self.prev_frame, cfg.keyframe)
        if decision.is_keyframe:
            with timer("keyframe_insertion"):
                self._insert_keyframe(frame, line_matches)
        return self._record(frame, decision.is_keyframe, decision.rule)

    def _record(self, frame, is_kf, rule, failed=False):
        rec = FrameRecord(frame.id, frame.timestamp, frame.pose, is_kf, rule,
                          frame.tracked_map_point_count, failed)
        self.records.append(rec)
        if not is_kf:
            frame.features = None  # only keyframes are matched against later
        self.prev_frame = frame
        return rec

    # -- keyframes ----------------------------------------------------------
    def _insert_keyframe(self, frame, line_matches):
        cfg, timer, rig = self.cfg, self.timer, self.rig
        m = self.map
        m.add_keyframe(frame)
        for i in np.nonzero(frame.point_ids >= 0)[0]:
            m.insert_point_observation(int(frame.point_ids[i]), frame.id, int(i))
        for j in np.nonzero(frame.line_ids >= 0)[0]:
            m.insert_line_observation(int(frame.line_ids[j]), frame.id, int(j))

        with timer("triangulation"):
            self._stereo_points(frame)
            if cfg.use_lines:
                self._stereo_lines(frame)
                self._new_lines(frame, line_matches)
        if self.audit:
            m.audit()

        if self.last_kf is not None:
            with timer("local_ba"):
                window = m.covisibility_window(frame.id, cfg.keyframe.window)
                res = local_bundle_adjustment(m, window, rig, cfg.optimizer)
                if res is not None:
                    self.ba_history.extend((frame.id,) + h for h in res.history)
                reject_window_outliers(m, window, rig, cfg.optimizer)
            with timer("map_maintenance"):
                self._refresh_endpoints(window)
                m.cull_landmarks()
        frame.tracked_map_point_count = max(frame.tracked_map_point_count,
                                            int((frame.point_ids >= 0).sum()))
        if self.audit:
            m.audit()
        self.last_kf = frame

    def _stereo_points(self, frame):
        f = frame.features
        tri = self.cfg.triangulation
        pose_inv = frame.pose.inverse()
        for i, j in f.stereo_matches:
            ul, ur = frame.keypoints[i], f.keypoints_right[j]
            if ul[0] - ur[0] < MIN_DISPARITY or abs(ul[1] - ur[1]) > tri.max_row_diff:
                continue
            frame.keypoints_right[i] = ur
            if frame.point_ids[i] >= 0:
                continue
            try:
                Xc = triangulate_point_stereo(ul, ur, self.rig, tri.max_row_diff)
            except TriangulationError:
                continue
            self.map.create_point(pose_inv.apply(Xc), frame.id, int(i))

    def _stereo_lines(self, frame):
        f, cfg = frame.features, self.cfg
        if not frame.segments:
            return
        segs_r = filter_short(merge_segments(f.segments_right, cfg.merge), cfg.merge.min_length)
        ok = np.all(np.isfinite(frame.keypoints_right), axis=1)
        stereo = np.array([(i, j) for i, j in f.stereo_matches if ok[i]], dtype=int).reshape(-1, 2)
        assoc_r = associate_points_to_lines(f.keypoints_right, segs_r, cfg.match.assoc_max_dist)
        frame.segments_right = segs_r
        frame.stereo_line_matches = {m: n for m, n, _ in
                                     match_lines(frame.associations, assoc_r, stereo, cfg.match)}

    def _line_fits(self, L, views):
        for pose, offset, seg in views:
            R = pose.rotation[None]
            t = (pose.translation + offset)[None]
            r = line_residuals(R, t, L.n[None], L.v[None], seg.p1[None], seg.p2[None], self.K)
            if not np.all(np.isfinite(r)) or r.max() > MAX_LINE_INIT_RESIDUAL:
                return False
        return True

    def _new_lines(self, frame, line_matches):
        cfg, K, m = self.cfg, self.K, self.map
        tri = cfg.triangulation
        prev = self.last_kf
        temporal = {n: mm for mm, n, _ in line_matches
                    if prev is not None and prev.line_ids[mm] < 0}
        right_pose = self.rig.right_pose(frame.pose)
        zero, off = np.zeros(3), self.rig.right_offset
        for j in np.nonzero(frame.line_ids < 0)[0]:
            j = int(j)
            seg = frame.segments[j]
            views = [(frame.pose, zero, seg)]
            pairs = []
            if j in frame.stereo_line_matches:
                seg_r = frame.segments_right[frame.stereo_line_matches[j]]
                views.append((frame.pose, off, seg_r))
                pairs.append((seg_r, right_pose))
            if j in temporal:
                seg_p = prev.segments[temporal[j]]
                views.append((prev.pose, zero, seg_p))
                pairs.append((seg_p, prev.pose))
            L = None
            if pairs:
                pi0 = back_project_plane(seg, frame.pose, K)
                angles = [plane_angle(pi0, back_project_plane(s, p, K)) for s, p in pairs]
                s_best, p_best = pairs[int(np.argmax(angles))]
                try:
                    L = triangulate_line_two_planes(seg, frame.pose, s_best, p_best, K,
                                                    tri.min_plane_angle)
                except TriangulationError:
                    L = None
            if L is None:
                L = self._line_from_points(frame, j)
            if L is None or not self._line_fits(L, views):
                continue
            try:
                ends = trim_endpoints(L, [(frame.pose, seg)], K)
            except TriangulationError:
                continue
            lid = m.create_line(L, ends, frame.id, j)
            if j in temporal:
                m.insert_line_observation(lid, prev.id, temporal[j])

    def _line_from_points(self, frame, j):
        idx = [i for i in sorted(frame.associations.get(j, ())) if frame.point_ids[i] >= 0]
        if len(idx) < 2:
            return None
        pixels = frame.keypoints[idx]
        X = [self.map.points[int(frame.point_ids[i])].position for i in idx]
        try:
            a, b = select_points_for_line(frame.segments[j], pixels, X)
            return triangulate_line_from_points(X[a], X[b])
        except TriangulationError:
            return None

    def _refresh_endpoints(self, window):
        m, K = self.map, self.K
        lids = set()
        for k in window:
            ids = m.keyframes[k].line_ids
            lids.update(int(x) for x in ids[ids >= 0])
        for lid in sorted(lids):
            ml = m.lines[lid]
            obs = [(m.keyframes[k].pose, m.keyframes[k].segments[i]) for k, i in ml.observations]
            try:
                ml.endpoints = trim_endpoints(ml.line, obs, K)
            except (TriangulationError, DegenerateGeometryError):
                pass

    def trajectory(self):
        return Trajectory(np.array([r.timestamp for r in self.records]),
                          [r.pose for r in self.records])


def _produce(provider, cfg, timer, out_q, stop):
    try:
        for i in range(len(provider)):
            if stop.is_set():
                break
            with timer("frontend"):
                f = provider.frame(i)
            with timer("line_processing"):
                prep = prepare_frame(f, cfg)
            out_q.put(prep)
    except Exception as exc:  # surface producer errors in the consumer
        out_q.put(exc)
    finally:
        out_q.put(None)


def run_odometry(provider, rig, cfg=RunConfig(), audit=False):
    """Run the backend over every frame of ``provider``.

    With ``cfg.threaded`` a producer thread renders and preprocesses frames into
    a bounded queue while the calling thread estimates and optimizes.
    """
    timer = StageTimer()
    vo = VisualOdometry(rig, cfg, provider.match, audit=audit, timer=timer)
    t0 = time.perf_counter()
    if cfg.threaded:
        q = queue.Queue(maxsize=cfg.queue_size)
        stop = threading.Event()
        producer_timer = StageTimer()
        th = threading.Thread(target=_produce, args=(provider, cfg, producer_timer, q, stop),
                              daemon=True)
        th.start()
        try:
            while True:
                with timer("queue_wait"):
                    item = q.get()
                if item is None:
                    break
                if isinstance(item, Exception):
                    raise item
                vo.process(item)
        finally:
            stop.set()
            while th.is_alive():
                try:
                    q.get_nowait()
                except queue.Empty:
                    th.join(timeout=0.01)
        for k, v in producer_timer.totals.items():
            timer.totals["producer_" + k] = v
    else:
        for i in range(len(provider)):
            with timer("frontend"):
                f = provider.frame(i)
            with timer("line_processing"):
                prep = prepare_frame(f, cfg)
            vo.process(prep)
    wall = time.perf_counter() - t0
    return PipelineResult(vo.trajectory(), vo.map, vo.records, timings=dict(timer.totals),
                          ba_history=vo.ba_history, wall_time=wall)


def scene_for(cfg):
    if cfg.scene_file:
        return load_scene(cfg.scene_file)
    return generate_scene(cfg.scene, cfg.seed)


def run_pipeline(cfg=RunConfig(), output_dir=None, audit=False):
    """End-to-end run: features, odometry, evaluation and optional outputs.

    Features come from ``cfg.features_dir`` when set, else from a synthetic
    scene (``cfg.scene_file`` or one generated from ``cfg.scene`` and the seed).
    """
    if cfg.features_dir:
        provider = FeatureFileProvider(cfg.features_dir)
        result = run_odometry(provider, provider.rig, cfg, audit=audit)
        gt_path = provider.ground_truth_path
        result.ground_truth = load_tum(gt_path) if gt_path else None
    else:
        scene = scene_for(cfg)
        provider = SyntheticFrontend(scene, cfg.noise, cfg.seed)
        result = run_odometry(provider, scene.rig, cfg, audit=audit)
        result.ground_truth = Trajectory(scene.timestamps, scene.poses)
    if result.ground_truth is not None:
        try:
            result.ate = evaluate_ate(result.trajectory, result.ground_truth)
        except ValueError as exc:  # sparse ground truth may not overlap enough
            log.warning("ATE not evaluated: %s", exc)
    if output_dir is not None:
        write_outputs(result, output_dir, cfg)
    return result


def write_outputs(result, output_dir, cfg=None):
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tum(result.trajectory, out / "trajectory.txt")
    if result.ground_truth is not None:
        save_tum(result.ground_truth, out / "groundtruth.txt")
    result.map.dump_json(out / "map.json")
    with open(out / "metrics.json", "w") as f:
        metrics = result.metrics()
        if cfg is not None:
            metrics["config"] = _jsonable(asdict(cfg))
        json.dump(metrics, f, indent=1, sort_keys=True)
        f.write("\n")
    emit_report(result.ate, out, timings=_timing_table(result))
    write_cost_log(out / "ba_cost.csv", [h[1:] for h in result.ba_history])


def _timing_table(result):
    t = dict(sorted(result.timings.items()))
    t["attributed_total"] = result.attributed_time
    t["wall"] = result.wall_time
    return t


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
