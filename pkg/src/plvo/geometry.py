"""Poses, pinhole cameras and 3D line algebra.

Lines are handled in two parameterizations: Plücker coordinates ``(n, v)``
for triangulation, transformation and projection, and the minimal
orthonormal form ``(U, W)`` in SO(3) x SO(2) used by the optimizer.

Conventions: poses map world to camera (``X_c = R @ X_w + t``); a Plücker
line stores the moment ``n = X x v`` of any point ``X`` on the line and the
direction ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXACT_TOL = 1e-9
PIXEL_TOL = 1e-6
REORTHO_PERIOD = 100


class DegenerateGeometryError(ValueError):
    """Raised when an input is a measure-zero configuration the math cannot handle."""


class ProjectionError(DegenerateGeometryError):
    """Raised when a projection is undefined (line through the camera center, point behind it)."""


# ---------------------------------------------------------------------------
# Lie group helpers

def skew(w):
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w):
    """Rodrigues' formula, with a Taylor expansion near zero."""
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    K = skew(w)
    if theta2 < 1e-12:
        return np.eye(3) + K + 0.5 * K @ K
    theta = np.sqrt(theta2)
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta2 * K @ K)


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off R + I
        M = 0.5 * (R + np.eye(3))
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-300))
        if axis @ vee < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * vee


def rot2(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotation_angle(R):
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)))


def project_to_so3(M):
    """Nearest rotation in the Frobenius sense (polar decomposition)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def _check_rotation(R, name, dim=3):
    if R.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {R.shape}")
    if (np.abs(R.T @ R - np.eye(dim)).max() > EXACT_TOL
            or abs(np.linalg.det(R) - 1.0) > EXACT_TOL):
        raise ValueError(f"{name} is not a proper rotation")


# ---------------------------------------------------------------------------
# Poses and cameras

@dataclass(frozen=True)
class PoseSE3:
    """World-to-camera rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(R, "rotation")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_camera_center(cls, R_wc, center):
        """Build from camera-to-world orientation and camera position."""
        R = np.asarray(R_wc, dtype=float).T
        return cls(R, -R @ np.asarray(center, dtype=float))

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    def inverse(self):
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def retract(self, delta):
        """Left perturbation ``(rho, omega)``: R <- Exp(w) R, t <- Exp(w) t + rho."""
        delta = np.asarray(delta, dtype=float)
        dR = so3_exp(delta[3:])
        return PoseSE3(dR @ self.rotation, dR @ self.translation + delta[:3])

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.image_width and 0 <= self.cy <= self.image_height):
            raise ValueError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def project(self, X_cam):
        """Pinhole projection of camera-frame points, shape (..., 3) -> (..., 2)."""
        X = np.asarray(X_cam, dtype=float)
        z = X[..., 2]
        if np.any(z <= 0):
            raise ProjectionError("point at or behind the camera plane")
        return np.stack([self.fx * X[..., 0] / z + self.cx,
                         self.fy * X[..., 1] / z + self.cy], axis=-1)

    def ray(self, uv):
        """Viewing direction (z = 1) of a pixel in the camera frame."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx,
                         (uv[..., 1] - self.cy) / self.fy,
                         np.ones(uv.shape[:-1])], axis=-1)

    def in_image(self, uv):
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= self.image_width)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= self.image_height))


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair; the right camera sits ``baseline`` meters along +X of the left."""

    intrinsics: PinholeIntrinsics
    baseline: float

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")

    @property
    def right_offset(self):
        # X_right = X_left + right_offset
        return np.array([-self.baseline, 0.0, 0.0])

    def right_pose(self, left_pose):
        return PoseSE3(left_pose.rotation, left_pose.translation + self.right_offset)


# ---------------------------------------------------------------------------
# 2D segments

@dataclass(frozen=True)
class LineSegment2D:
    """Image segment with unit-normal implicit line ``a x + b y + c = 0``."""

    a: float
    b: float
    c: float
    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        p1 = np.array(self.p1, dtype=float).reshape(2)
        p2 = np.array(self.p2, dtype=float).reshape(2)
        p1.flags.writeable = False
        p2.flags.writeable = False
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p2", p2)
        if np.array_equal(p1, p2):
            raise DegenerateGeometryError("segment endpoints coincide")
        if abs(self.a ** 2 + self.b ** 2 - 1.0) > EXACT_TOL:
            raise ValueError("line normal (a, b) must have unit length")
        for p in (p1, p2):
            if abs(self.a * p[0] + self.b * p[1] + self.c) > PIXEL_TOL:
                raise ValueError("endpoint does not lie on the segment's line")

    @property
    def coefficients(self):
        return np.array([self.a, self.b, self.c])

    @property
    def length(self):
        return float(np.linalg.norm(self.p2 - self.p1))

    @property
    def midpoint(self):
        return 0.5 * (self.p1 + self.p2)

    @property
    def direction(self):
        d = self.p2 - self.p1
        return d / np.linalg.norm(d)

    def reversed(self):
        return segment_from_endpoints(self.p2, self.p1)


def segment_from_endpoints(p1, p2):
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    d = p2 - p1
    length = np.hypot(d[0], d[1])
    if length == 0.0:
        raise DegenerateGeometryError("segment endpoints coincide")
    a, b = -d[1] / length, d[0] / length
    c = -(a * p1[0] + b * p1[1])
    return LineSegment2D(a, b, c, p1, p2)


def point_line_distance(p, line):
    """Unsigned distance from pixel(s) ``p`` to a segment's infinite line.

    ``line`` may be a :class:`LineSegment2D` or raw coefficients ``(a, b, c)``.
    """
    if isinstance(line, LineSegment2D):
        a, b, c = line.a, line.b, line.c
    else:
        a, b, c = np.asarray(line, dtype=float)
    p = np.asarray(p, dtype=float)
    return np.abs(a * p[..., 0] + b * p[..., 1] + c) / np.hypot(a, b)


# ---------------------------------------------------------------------------
# 3D lines

@dataclass(frozen=True)
class PluckerLine:
    n: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        n = np.array(self.n, dtype=float).reshape(3)
        v = np.array(self.v, dtype=float).reshape(3)
        n.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "v", v)
        vn = np.linalg.norm(v)
        if vn == 0.0:
            raise DegenerateGeometryError("line direction is zero (line at infinity)")
        if abs(n @ v) > EXACT_TOL * max(1.0, np.linalg.norm(n) * vn):
            raise ValueError("Plücker constraint n·v = 0 violated")

    @property
    def vector(self):
        return np.concatenate([self.n, self.v])

    def normalized(self):
        """Rescale so that ``|v| = 1``."""
        s = np.linalg.norm(self.v)
        return PluckerLine(self.n / s, self.v / s)

    @property
    def closest_point(self):
        """Point on the line nearest the origin."""
        return np.cross(self.v, self.n) / (self.v @ self.v)

    def distance_to_point(self, X):
        X = np.asarray(X, dtype=float)
        vn = np.linalg.norm(self.v)
        return np.linalg.norm(np.cross(X, self.v) - self.n, axis=-1) / vn


@dataclass(frozen=True)
class OrthonormalLine:
    U: np.ndarray
    W: np.ndarray
    updates: int = 0  # chained-update counter driving periodic re-orthonormalization

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        W = np.array(self.W, dtype=float)
        _check_rotation(U, "U")
        _check_rotation(W, "W", dim=2)
        U.flags.writeable = False
        W.flags.writeable = False
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "W", W)

    @property
    def w(self):
        return self.W[:, 0]


def plucker_to_orthonormal(L):
    """Closed-form split of ``[n | v]`` into ``U Σ`` with ``Σ`` folded into an SO(2) matrix."""
    nn = np.linalg.norm(L.n)
    vn = np.linalg.norm(L.v)
    if nn == 0.0:
        raise DegenerateGeometryError("line passes through the origin; orthonormal form undefined")
    u1 = L.n / nn
    u2 = L.v / vn
    u3 = np.cross(L.n, L.v)
    u3 /= np.linalg.norm(u3)
    U = np.column_stack([u1, u2, u3])
    # n ⟂ v only up to rounding; snap U back onto SO(3)
    U = project_to_so3(U)
    s = np.hypot(nn, vn)
    W = np.array([[nn / s, -vn / s], [vn / s, nn / s]])
    return OrthonormalLine(U, W)


def plucker_to_orthonormal_qr(L):
    """Same map as :func:`plucker_to_orthonormal` via a complete QR of ``[n | v]``."""
    if np.linalg.norm(L.n) == 0.0:
        raise DegenerateGeometryError("line passes through the origin; orthonormal form undefined")
    Q, R = np.linalg.qr(np.column_stack([L.n, L.v]), mode="complete")
    signs = np.sign(np.diag(R))
    Q[:, :2] *= signs
    R[:2] *= signs[:, None]
    if np.linalg.det(Q) < 0:
        Q[:, 2] *= -1
    sig = np.array([R[0, 0], R[1, 1]])
    sig /= np.linalg.norm(sig)
    W = np.array([[sig[0], -sig[1]], [sig[1], sig[0]]])
    return OrthonormalLine(Q, W)


def orthonormal_to_plucker(O):
    """Inverse map: ``n = w1 u1``, ``v = w2 u2`` (unit overall scale, not renormalized)."""
    w1, w2 = O.W[0, 0], O.W[1, 0]
    return PluckerLine(w1 * O.U[:, 0], w2 * O.U[:, 1])


def orthonormal_update(O, delta):
    """Minimal 4-DoF update: ``U <- U Exp(delta[:3])``, ``W <- W Rot2(delta[3])``."""
    delta = np.asarray(delta, dtype=float)
    U = O.U @ so3_exp(delta[:3])
    W = O.W @ rot2(delta[3])
    count = O.updates + 1
    if count % REORTHO_PERIOD == 0:
        U = project_to_so3(U)
        W = rot2(np.arctan2(W[1, 0], W[0, 0]))
    return OrthonormalLine(U, W, count)


def plucker_from_two_points(X1, X2):
    """Line through two points with unit direction ``(X1 - X2)/|X1 - X2|``.

    The moment is taken consistently with that direction, ``n = X1 x v``,
    so both points satisfy ``X x v = n``.
    """
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    d = X1 - X2
    dn = np.linalg.norm(d)
    if dn == 0.0:
        raise DegenerateGeometryError("coincident points do not define a line")
    v = d / dn
    n = np.cross(X1, v)
    # exact orthogonality: remove the rounding component along v
    n = n - (n @ v) * v
    return PluckerLine(n, v)


def transform_line(pose, L):
    """Move a Plücker line by a rigid transform (world to camera for a camera pose)."""
    R, t = pose.rotation, pose.translation
    Rv = R @ L.v
    n = R @ L.n + np.cross(t, Rv)
    # exact orthogonality: remove the rounding component along v
    n = n - (n @ Rv) / (Rv @ Rv) * Rv
    return PluckerLine(n, Rv)


def line_projection_matrix(K):
    """Maps a camera-frame moment to image line coefficients, ``l ∝ K^-T n``.

    Scaled by ``fx fy`` so that all entries are polynomial in the intrinsics.
    """
    fx, fy, cx, cy = K.fx, K.fy, K.cx, K.cy
    return np.array([[fy, 0.0, 0.0],
                     [0.0, fx, 0.0],
                     [-fy * cx, -fx * cy, fx * fy]])


def project_line(K, L_cam, normalize=True):
    """Image line ``(a, b, c)`` of a camera-frame line; unit ``(a, b)`` unless ``normalize=False``."""
    n = L_cam.n if isinstance(L_cam, PluckerLine) else np.asarray(L_cam, dtype=float)
    l = line_projection_matrix(K) @ n
    if not np.any(l):
        raise ProjectionError("line passes through the camera center")
    if not normalize:
        return l
    ab = np.hypot(l[0], l[1])
    if ab <= 1e-12 * np.abs(l).max():
        raise ProjectionError("line lies in the focal plane; its image is at infinity")
    return l / ab
