"""2D line post-processing: merging fragmented segments, length filtering,
point-to-line association and line matching by shared point matches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import segment_from_endpoints


@dataclass(frozen=True)
class MergeParams:
    max_angle: float = np.deg2rad(3.0)  # delta_theta
    max_midpoint_dist: float = 3.0      # delta_d
    max_endpoint_gap: float = 10.0      # delta_ep
    min_length: float = 50.0

    def __post_init__(self):
        for name in ("max_angle", "max_midpoint_dist", "max_endpoint_gap", "min_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MatchParams:
    min_score: float = 0.8      # delta_S
    min_shared_points: int = 3  # delta_N
    assoc_max_dist: float = 3.0

    def __post_init__(self):
        if not 0 < self.min_score <= 1:
            raise ValueError("min_score must be in (0, 1]")
        if self.min_shared_points < 1:
            raise ValueError("min_shared_points must be >= 1")
        if not self.assoc_max_dist > 0:
            raise ValueError("assoc_max_dist must be positive")


class PointLineAssociation(dict):
    """Mapping ``line index -> frozenset of keypoint indices`` on that line.

    Every line index of the source frame is present, possibly with an empty set.
    """

    def point_to_lines(self):
        out = {}
        for j, pts in self.items():
            for i in pts:
                out.setdefault(i, []).append(j)
        return out


def _segment_arrays(segments):
    P1 = np.array([s.p1 for s in segments], dtype=float).reshape(-1, 2)
    P2 = np.array([s.p2 for s in segments], dtype=float).reshape(-1, 2)
    abc = np.array([(s.a, s.b, s.c) for s in segments], dtype=float).reshape(-1, 3)
    return P1, P2, abc


def _mergeable(P1, P2, abc, params):
    """Boolean matrix of segment pairs meeting all three merge conditions."""
    d = P2 - P1
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    cosang = np.clip(np.abs(d @ d.T), 0.0, 1.0)
    angle_ok = np.arccos(cosang) < params.max_angle

    mid = 0.5 * (P1 + P2)
    # dist[i, j]: midpoint of i to the infinite line of j
    dist = np.abs(mid @ abc[:, :2].T + abc[:, 2][None, :])
    mid_ok = (dist <= params.max_midpoint_dist) & (dist.T <= params.max_midpoint_dist)

    lo = np.minimum(P1, P2)
    hi = np.maximum(P1, P2)
    overlap_x = (lo[:, None, 0] <= hi[None, :, 0]) & (lo[None, :, 0] <= hi[:, None, 0])
    overlap_y = (lo[:, None, 1] <= hi[None, :, 1]) & (lo[None, :, 1] <= hi[:, None, 1])
    ends = np.stack([P1, P2], axis=1)  # (N, 2, 2)
    gaps = np.linalg.norm(ends[:, None, :, None, :] - ends[None, :, None, :, :], axis=-1)
    gap = gaps.reshape(len(P1), len(P1), 4).min(axis=2)
    gap_ok = overlap_x | overlap_y | (gap < params.max_endpoint_gap)

    ok = angle_ok & mid_ok & gap_ok
    np.fill_diagonal(ok, False)
    return ok


def _merge_pair(s1, s2):
    pts = np.array([s1.p1, s1.p2, s2.p1, s2.p2])
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    i, j = np.unravel_index(np.argmax(D), D.shape)
    i, j = min(i, j), max(i, j)
    return segment_from_endpoints(pts[i], pts[j])


def merge_segments(segments, params=MergeParams(), return_groups=False):
    """Merge fragmented collinear segments until no pair qualifies.

    Pairs are merged greedily by descending combined length; the merged
    segment spans the two mutually farthest endpoints. With
    ``return_groups=True`` also returns, per output segment, the sorted
    input indices it absorbed.
    """
    segs = list(segments)
    groups = [[i] for i in range(len(segs))]
    while len(segs) > 1:
        P1, P2, abc = _segment_arrays(segs)
        ok = _mergeable(P1, P2, abc, params)
        iu, ju = np.nonzero(np.triu(ok))
        if len(iu) == 0:
            break
        lengths = np.linalg.norm(P2 - P1, axis=1)
        combined = lengths[iu] + lengths[ju]
        # descending combined length, ties by lowest index pair
        k = np.lexsort((ju, iu, -combined))[0]
        i, j = int(iu[k]), int(ju[k])
        merged = _merge_pair(segs[i], segs[j])
        segs[i] = merged
        groups[i] = sorted(groups[i] + groups[j])
        del segs[j]
        del groups[j]
    if return_groups:
        return segs, groups
    return segs


def filter_short(segments, min_length):
    return [s for s in segments if s.length >= min_length]


def associate_points_to_lines(points, segments, assoc_max_dist=3.0):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    assoc = PointLineAssociation()
    if not segments:
        return assoc
    P1, P2, abc = _segment_arrays(segments)
    dist = np.abs(points @ abc[:, :2].T + abc[:, 2][None, :])  # (M, N)
    lo = np.minimum(P1, P2)
    hi = np.maximum(P1, P2)
    x, y = points[:, 0:1], points[:, 1:2]
    in_x = (lo[None, :, 0] <= x) & (x <= hi[None, :, 0])
    in_y = (lo[None, :, 1] <= y) & (y <= hi[None, :, 1])
    belongs = (dist < assoc_max_dist) & (in_x | in_y)
    for j in range(len(segments)):
        assoc[j] = frozenset(np.nonzero(belongs[:, j])[0].tolist())
    return assoc


def line_match_scores(assoc_k, assoc_k1, point_matches):
    """Shared-match counts and confidence scores for every candidate line pair.

    Returns ``{(m, n): (N_pm, S_mn)}`` for pairs with at least one shared match.
    A point on several lines counts toward each of them.
    """
    lines_of_k = assoc_k.point_to_lines()
    lines_of_k1 = assoc_k1.point_to_lines()
    shared = {}
    for ia, ib in point_matches:
        la = lines_of_k.get(int(ia))
        lb = lines_of_k1.get(int(ib))
        if not la or not lb:
            continue
        for m in la:
            for n in lb:
                shared[(m, n)] = shared.get((m, n), 0) + 1
    out = {}
    for (m, n), count in shared.items():
        denom = min(len(assoc_k[m]), len(assoc_k1[n]))
        out[(m, n)] = (count, count / denom)
    return out


def match_lines(assoc_k, assoc_k1, point_matches, params=MatchParams()):
    """One-to-one line matches ``[(m, n, score), ...]`` sorted by ``m``.

    A pair qualifies when ``S_mn > min_score`` and ``N_pm > min_shared_points``;
    conflicts resolve by descending score, then lower frame-k index.
    """
    scores = line_match_scores(assoc_k, assoc_k1, point_matches)
    cand = [(s, m, n) for (m, n), (count, s) in scores.items()
            if s > params.min_score and count > params.min_shared_points]
    cand.sort(key=lambda c: (-c[0], c[1], c[2]))
    used_k, used_k1, out = set(), set(), []
    for s, m, n in cand:
        if m in used_k or n in used_k1:
            continue
        used_k.add(m)
        used_k1.add(n)
        out.append((m, n, s))
    out.sort()
    return out
