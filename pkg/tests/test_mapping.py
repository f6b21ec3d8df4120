import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from plvo.geometry import plucker_from_two_points
from plvo.mapping import (
    KeyframeThresholds,
    Map,
    MapError,
    MapPoint,
    keyframe_decision,
)

from .cases import make_frame as frame

TH = KeyframeThresholds()


def decide(cur, last=None, prev=None, th=TH):
    return keyframe_decision(cur, last or frame(0), prev or frame(1), th)


# -- keyframe rules ---------------------------------------------------------------------

def test_all_gates_closed():
    assert decide(frame(2, tracked=TH.low_track + 10)) == (False, None)


def test_rule3_midway_tracking():
    d = decide(frame(2, tracked=(TH.low_track + TH.critical_track) // 2))
    assert d == (True, "low_track")


def test_rule4_recovery_after_loss():
    d = decide(frame(2, tracked=TH.low_track + 10), prev=frame(1, tracked=TH.critical_track - 1))
    assert d == (True, "recovered")


def test_rules_distance_and_angle():
    assert decide(frame(2, center=(0.31, 0, 0))) == (True, "distance")
    assert decide(frame(2, center=(0.29, 0, 0))) == (False, None)
    assert decide(frame(2, rotvec=(0, np.deg2rad(16), 0))) == (True, "angle")
    assert decide(frame(2, rotvec=(0, np.deg2rad(14), 0))) == (False, None)


def test_rule3_bounds_are_strict():
    assert not decide(frame(2, tracked=TH.low_track)).is_keyframe
    assert not decide(frame(2, tracked=TH.critical_track)).is_keyframe
    assert decide(frame(2, tracked=TH.low_track - 1)).rule == "low_track"


def test_rule_order_reports_first():
    d = decide(frame(2, center=(1, 0, 0), rotvec=(0.5, 0, 0), tracked=30))
    assert d == (True, "distance")


def test_thresholds_validation():
    with pytest.raises(ValueError):
        KeyframeThresholds(low_track=20, critical_track=20)
    with pytest.raises(ValueError):
        KeyframeThresholds(min_distance=0)


@given(st.floats(0, 1), st.floats(0, 0.6), st.integers(0, 300), st.integers(0, 300),
       st.floats(0, 1), st.floats(0, 0.6))
def test_decision_pure_and_monotone(dist, ang, tracked, prev_tracked, extra_d, extra_a):
    axis = np.array([0.3, -0.8, 0.52])
    axis /= np.linalg.norm(axis)
    prev = frame(1, tracked=prev_tracked)
    a = decide(frame(2, center=(dist, 0, 0), rotvec=ang * axis, tracked=tracked), prev=prev)
    b = decide(frame(2, center=(dist, 0, 0), rotvec=ang * axis, tracked=tracked), prev=prev)
    assert a == b
    if a.is_keyframe:
        far = frame(2, center=(dist + extra_d, 0, 0), rotvec=(ang + extra_a) * axis, tracked=tracked)
        assert decide(far, prev=prev).is_keyframe


# -- landmark bookkeeping --------------------------------------------------------------------

def small_map(n_kf=3):
    m = Map()
    for i in range(n_kf):
        m.add_keyframe(frame(i))
    return m


def test_create_then_insert_counts():
    m = small_map()
    pid = m.create_point((1, 2, 3), 0, 4)
    m.insert_point_observation(pid, 1, 2)
    assert len(m.points[pid].observations) == 2
    assert m.keyframes[0].point_ids[4] == pid and m.keyframes[1].point_ids[2] == pid
    lid = m.create_line(plucker_from_two_points((0, 0, 1), (1, 0, 1)),
                        ((0, 0, 1), (1, 0, 1)), 0, 1)
    m.insert_line_observation(lid, 2, 0)
    assert len(m.lines[lid].observations) == 2
    m.audit()


def test_collisions_rejected():
    m = small_map()
    pid = m.create_point((1, 2, 3), 0, 4)
    with pytest.raises(MapError):
        m.insert_point_observation(pid, 0, 5)   # same keyframe twice
    other = m.create_point((0, 0, 1), 1, 0)
    with pytest.raises(MapError):
        m.insert_point_observation(other, 0, 4)  # keypoint already linked
    with pytest.raises(MapError):
        m.add_keyframe(frame(1))
    with pytest.raises(ValueError):
        MapPoint((np.nan, 0, 0))


def test_cull_keeps_multi_view_landmarks():
    m = small_map(1)
    keep = m.create_point((1, 1, 1), 0, 0)
    drop = m.create_point((2, 2, 2), 0, 1)
    m.add_keyframe(frame(1))
    m.insert_point_observation(keep, 1, 0)
    for i in range(2, 4):
        m.add_keyframe(frame(i))
    assert m.cull_landmarks() == 0          # third opportunity not yet passed
    m.add_keyframe(frame(4))
    assert m.cull_landmarks() == 1
    assert keep in m.points and drop not in m.points
    assert m.keyframes[0].point_ids[1] == -1
    m.audit()


def test_culled_landmark_leaves_covisibility():
    m = small_map(1)
    m.add_keyframe(frame(1))
    pid = m.create_point((1, 1, 1), 0, 0)
    m.insert_point_observation(pid, 1, 0)
    assert m.covisibility(0) == {1: 1}
    m.remove_point(pid)
    assert m.covisibility(0) == {}
    m.audit()


def test_remove_last_observation_drops_landmark():
    m = small_map()
    pid = m.create_point((1, 1, 1), 0, 0)
    m.insert_point_observation(pid, 1, 0)
    m.remove_point_observation(pid, 0)
    assert m.points[pid].observations == [(1, 0)]
    m.remove_point_observation(pid, 1)
    assert pid not in m.points
    m.audit()


def test_audit_detects_broken_links():
    m = small_map()
    pid = m.create_point((1, 1, 1), 0, 0)
    m.keyframes[0].point_ids[0] = -1
    with pytest.raises(MapError):
        m.audit()
    m.keyframes[0].point_ids[0] = pid
    m.keyframes[1].point_ids[3] = pid
    with pytest.raises(MapError):
        m.audit()


# -- co-visibility -----------------------------------------------------------------------------

def chain_map(n):
    """Keyframes 0..n-1 where each shares one point with its neighbors only."""
    m = small_map(n)
    for i in range(n - 1):
        pid = m.create_point((i, 0, 1), i, 0)
        m.insert_point_observation(pid, i + 1, 1)
    return m


def test_window_single_keyframe():
    assert small_map(1).covisibility_window(0, 5) == [0]


def test_window_chain_picks_most_recent():
    m = chain_map(6)
    assert m.covisibility_window(5, 3) == [3, 4, 5]


def test_window_disjoint_padded_by_recency():
    m = small_map(6)
    for i in range(6):
        m.create_point((i, 0, 1), i, 0)
    assert m.covisibility_window(5, 3) == [3, 4, 5]
    assert m.covisibility(5) == {}


def test_window_prefers_shared_over_recent():
    m = small_map(6)
    for k in range(4):
        pid = m.create_point((k, 0, 1), 0, k)
        m.insert_point_observation(pid, 5, k)
    assert m.covisibility_window(5, 2) == [0, 5]


def test_window_returns_all_when_small():
    assert chain_map(3).covisibility_window(2, 10) == [0, 1, 2]
    with pytest.raises(MapError):
        Map().covisibility_window(0, 3)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_window_size_and_membership(seed, size):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 10))
    m = small_map(n)
    for _ in range(int(rng.integers(0, 15))):
        kfs = rng.choice(n, size=min(n, int(rng.integers(1, 4))), replace=False)
        free = [(k, np.flatnonzero(m.keyframes[int(k)].point_ids < 0)) for k in kfs]
        if any(len(f) == 0 for _, f in free):
            continue
        pid = m.create_point(rng.normal(size=3), int(kfs[0]), int(free[0][1][0]))
        for k, f in free[1:]:
            m.insert_point_observation(pid, int(k), int(f[0]))
    m.audit()
    cur = int(rng.integers(0, n))
    w = m.covisibility_window(cur, size)
    assert cur in w and len(w) <= size and w == sorted(set(w))


# -- export ------------------------------------------------------------------------------------

def test_dump_json_round_trips(tmp_path):
    m = chain_map(3)
    m.create_line(plucker_from_two_points((0, 0, 1), (1, 0, 1)), ((0, 0, 1), (1, 0, 1)), 2, 0)
    path = tmp_path / "map.json"
    m.dump_json(path)
    d = json.loads(path.read_text())
    assert [k["id"] for k in d["keyframes"]] == [0, 1, 2]
    assert len(d["points"]) == 2 and len(d["lines"]) == 1
    assert d["points"][0]["observations"] == [[0, 0], [1, 1]]
