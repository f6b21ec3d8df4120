"""Landmark initialization: rectified-stereo points, two-plane line
intersection, the two-point fallback, and 3D endpoint trimming."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    EXACT_TOL,
    DegenerateGeometryError,
    PluckerLine,
    plucker_from_two_points,
    point_line_distance,
)

DEFAULT_MIN_PLANE_ANGLE = np.deg2rad(1.0)
MAX_ROW_DIFF = 2.0


class TriangulationError(DegenerateGeometryError):
    """Raised when a landmark cannot be initialized from the given observations."""


class DegenerateLineError(TriangulationError):
    """Raised when the two back-projected planes are too close to parallel."""


@dataclass(frozen=True)
class Plane3D:
    """Plane ``normal · X + offset = 0`` with a unit normal."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.array(self.normal, dtype=float).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > EXACT_TOL:
            raise ValueError("plane normal must have unit length")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def distance(self, X):
        return np.asarray(X, dtype=float) @ self.normal + self.offset


def triangulate_point_stereo(u_left, u_right, rig, max_row_diff=MAX_ROW_DIFF):
    """Left-camera-frame point from a rectified stereo correspondence."""
    K = rig.intrinsics
    u_left = np.asarray(u_left, dtype=float)
    u_right = np.asarray(u_right, dtype=float)
    disp = u_left[0] - u_right[0]
    if not disp > 0:
        raise TriangulationError(f"non-positive disparity {disp:.3g}")
    if abs(u_left[1] - u_right[1]) > max_row_diff:
        raise TriangulationError("stereo rows disagree; pair not rectified or mismatched")
    b = rig.baseline
    return np.array([b * (u_left[0] - K.cx) / disp,
                     b * (u_left[1] - K.cy) * (K.fx / K.fy) / disp,
                     b * K.fx / disp])


def back_project_plane(seg, pose, K):
    """World-frame plane through the camera center and both endpoint rays."""
    rays = K.ray(np.stack([seg.p1, seg.p2]))
    n_c = np.cross(rays[0], rays[1])
    n_c /= np.linalg.norm(n_c)
    normal = pose.rotation.T @ n_c
    normal /= np.linalg.norm(normal)
    return Plane3D(normal, float(n_c @ pose.translation))


def plane_angle(pi1, pi2):
    """Dihedral angle in [0, pi/2] between two planes."""
    s = np.linalg.norm(np.cross(pi1.normal, pi2.normal))
    return float(np.arcsin(min(1.0, s)))


def intersect_planes(pi1, pi2):
    """Plücker line shared by two planes (dual Plücker matrix ``π1 π2ᵀ - π2 π1ᵀ``)."""
    v = np.cross(pi1.normal, pi2.normal)
    vn = np.linalg.norm(v)
    if vn == 0.0:
        raise DegenerateLineError("planes are parallel")
    n = pi1.offset * pi2.normal - pi2.offset * pi1.normal
    n, v = n / vn, v / vn
    n = n - (n @ v) * v
    return PluckerLine(n, v)


def _ray_params_on_line(C, d, L):
    """Closest-point parameters between ray ``C + s d`` and line ``L``.

    Returns ``(s, tau)`` where ``tau`` locates the point ``P0 + tau v`` on the
    (unit-direction) line with ``P0`` its point nearest the origin.
    """
    Ln = L.normalized()
    v = Ln.v
    P0 = Ln.closest_point
    w0 = C - P0
    b = d @ v
    a = d @ d
    denom = a - b * b
    if denom <= 1e-15 * a:
        raise TriangulationError("viewing ray parallel to the line")
    dd, e = d @ w0, v @ w0
    s = (b * e - dd) / denom
    tau = (a * e - b * dd) / denom
    return s, tau


def _check_in_front(L, observations, K):
    for pose, seg in observations:
        C = pose.center
        for p in (seg.p1, seg.p2):
            d = pose.rotation.T @ K.ray(p)
            s, _ = _ray_params_on_line(C, d, L)
            if not s > 0:
                raise TriangulationError("line triangulated behind a camera")


def triangulate_line_two_planes(seg1, pose1, seg2, pose2, K,
                                min_angle=DEFAULT_MIN_PLANE_ANGLE, check_cheirality=True):
    """Intersect the back-projection planes of two observations of one line."""
    pi1 = back_project_plane(seg1, pose1, K)
    pi2 = back_project_plane(seg2, pose2, K)
    angle = plane_angle(pi1, pi2)
    if angle < min_angle:
        raise DegenerateLineError(
            f"back-projected planes {np.rad2deg(angle):.3g} deg apart")
    L = intersect_planes(pi1, pi2)
    if check_cheirality:
        _check_in_front(L, [(pose1, seg1), (pose2, seg2)], K)
    return L


def select_points_for_line(seg, pixels, points3d):
    """Indices of the two triangulated points closest to ``seg`` in the image."""
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(pixels) < 2:
        raise TriangulationError("fewer than two triangulated points on the line")
    dist = point_line_distance(pixels, seg)
    order = np.argsort(dist, kind="stable")
    i, j = int(order[0]), int(order[1])
    if np.array_equal(points3d[i], points3d[j]):
        raise TriangulationError("selected points coincide")
    return i, j


def triangulate_line_from_points(X1, X2):
    """Fallback line from two triangulated points on it, stored with unit direction."""
    try:
        return plucker_from_two_points(X1, X2).normalized()
    except DegenerateGeometryError as exc:
        raise TriangulationError(str(exc)) from exc


def trim_endpoints(L, observations, K):
    """3D endpoints of ``L`` spanning the back-projected endpoints of every observation."""
    if not observations:
        raise ValueError("at least one observation is required")
    Ln = L.normalized()
    v, P0 = Ln.v, Ln.closest_point
    C = np.repeat([pose.center for pose, _ in observations], 2, axis=0)
    d = np.concatenate([np.stack([pose.rotation.T @ K.ray(seg.p1), pose.rotation.T @ K.ray(seg.p2)])
                        for pose, seg in observations])
    # closest points between each viewing ray and the line, as in _ray_params_on_line
    w0 = C - P0
    a = np.einsum("ij,ij->i", d, d)
    b = d @ v
    denom = a - b * b
    if np.any(denom <= 1e-15 * a):
        raise TriangulationError("viewing ray parallel to the line")
    dd, e = np.einsum("ij,ij->i", d, w0), w0 @ v
    taus = (a * e - b * dd) / denom
    return P0 + taus.min() * v, P0 + taus.max() * v
