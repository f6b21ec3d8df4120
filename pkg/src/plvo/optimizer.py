"""Point and line reprojection residuals, their analytic Jacobians, robust
motion-only pose estimation and Levenberg-Marquardt local bundle adjustment.

Pose increments are left perturbations ``(rho, omega)`` as in
:meth:`PoseSE3.retract`; line increments are the 4-vector of
:func:`orthonormal_update`; point increments are additive.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    OrthonormalLine,
    PoseSE3,
    ProjectionError,
    line_projection_matrix,
    orthonormal_to_plucker,
    plucker_to_orthonormal,
    project_to_so3,
    rot2,
)

log = logging.getLogger(__name__)

CHI2_2DOF_95 = 5.991


class TrackingFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "huber"
    delta: float = 2.45

    def __post_init__(self):
        if self.kind != "huber":
            raise ValueError(f"unsupported kernel {self.kind!r}")
        if not self.delta > 0:
            raise ValueError("kernel delta must be positive")

    def cost(self, s):
        """Robustified value of squared (whitened) residual norms ``s``."""
        s = np.asarray(s, dtype=float)
        d2 = self.delta ** 2
        return np.where(s <= d2, s, 2.0 * self.delta * np.sqrt(s) - d2)

    def weight(self, s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= self.delta ** 2, 1.0,
                        self.delta / np.sqrt(np.maximum(s, 1e-300)))


@dataclass(frozen=True)
class LineResidual:
    value: np.ndarray


@dataclass(frozen=True)
class PointResidual:
    value: np.ndarray


@dataclass(frozen=True)
class OptimizerConfig:
    huber_delta: float = 2.45
    sigma_point: float = 1.0
    sigma_line: float = 1.0
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    max_iterations: int = 20
    relative_tolerance: float = 1e-8
    step_tolerance: float = 1e-10     # stop once |step| <= tol * (|params| + tol)
    outlier_chi2: float = CHI2_2DOF_95
    min_line_parallax: float = np.deg2rad(3.0)
    use_lines: bool = True

    @property
    def kernel(self):
        return RobustKernel("huber", self.huber_delta)


# ---------------------------------------------------------------------------
# Batched residuals and Jacobians

def _skew_batch(w):
    S = np.zeros(w.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -w[..., 2], w[..., 1]
    S[..., 1, 0], S[..., 1, 2] = w[..., 2], -w[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -w[..., 1], w[..., 0]
    return S


def so3_exp_batch(w):
    w = np.asarray(w, dtype=float)
    theta2 = np.einsum("...i,...i->...", w, w)
    theta = np.sqrt(theta2)
    small = theta2 < 1e-12
    safe = np.where(small, 1.0, theta)
    A = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    B = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = _skew_batch(w)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * (K @ K)


def _offset_chain(J_pose, offsets):
    """Map Jacobians w.r.t. a rigidly offset camera's own perturbation onto the body pose.

    A camera at ``X_cam = X_body + o`` sees the body increment ``(rho, omega)`` as
    ``(rho + [o]x omega, omega)``.
    """
    if offsets is None:
        return J_pose
    J = J_pose.copy()
    J[..., 3:] += J_pose[..., :3] @ _skew_batch(offsets)
    return J


def point_residuals(R, t, X, obs, K, jacobians=False, offsets=None):
    """Residuals ``obs - π(R X + t)`` for stacked observations.

    ``R`` (M,3,3), ``t`` (M,3) is the body pose per row, ``offsets`` (M,3) the
    optional camera offset (right camera of a stereo pair). Returns ``r``
    (M,2), and with ``jacobians=True`` also ``J_pose`` (M,2,6), ``J_point`` (M,2,3).
    Rows with non-positive depth produce NaN residuals.
    """
    tc = t if offsets is None else t + offsets
    Xc = np.einsum("mij,mj->mi", R, X) + tc
    z = Xc[:, 2]
    bad = z <= 0
    zs = np.where(bad, 1.0, z)
    u = K.fx * Xc[:, 0] / zs + K.cx
    v = K.fy * Xc[:, 1] / zs + K.cy
    r = obs - np.stack([u, v], axis=1)
    r[bad] = np.nan
    if not jacobians:
        return r
    M = len(X)
    Jp = np.zeros((M, 2, 3))
    Jp[:, 0, 0] = K.fx / zs
    Jp[:, 0, 2] = -K.fx * Xc[:, 0] / zs ** 2
    Jp[:, 1, 1] = K.fy / zs
    Jp[:, 1, 2] = -K.fy * Xc[:, 1] / zs ** 2
    J_pose = np.empty((M, 2, 6))
    J_pose[:, :, :3] = -Jp
    J_pose[:, :, 3:] = Jp @ _skew_batch(Xc)
    J_point = -Jp @ R
    return r, _offset_chain(J_pose, offsets), J_point


def _orthonormal_plucker_batch(U, phi):
    w1, w2 = np.cos(phi), np.sin(phi)
    return w1[:, None] * U[:, :, 0], w2[:, None] * U[:, :, 1]


def line_residuals(R, t, n_w, v_w, p1, p2, K, jacobians=False, U=None, phi=None, offsets=None):
    """Endpoint-to-reprojected-line distances for stacked line observations.

    Returns ``r`` (M,2). With ``jacobians=True`` (which requires the
    orthonormal parameters ``U`` (M,3,3), ``phi`` (M,) consistent with
    ``n_w, v_w``) also ``J_pose`` (M,2,6) and ``J_line`` (M,2,4).
    Rows whose projection is undefined produce NaN residuals.
    """
    tc = t if offsets is None else t + offsets
    v_c = np.einsum("mij,mj->mi", R, v_w)
    n_c = np.einsum("mij,mj->mi", R, n_w) + np.cross(tc, v_c)
    P = line_projection_matrix(K)
    l = n_c @ P.T
    norm = np.hypot(l[:, 0], l[:, 1])
    bad = norm <= 1e-12 * np.maximum(1.0, np.abs(l).max(axis=1))
    ns = np.where(bad, 1.0, norm)
    e1 = l[:, 0] * p1[:, 0] + l[:, 1] * p1[:, 1] + l[:, 2]
    e2 = l[:, 0] * p2[:, 0] + l[:, 1] * p2[:, 1] + l[:, 2]
    r = np.stack([np.abs(e1), np.abs(e2)], axis=1) / ns[:, None]
    r[bad] = np.nan
    if not jacobians:
        return r
    M = len(R)
    dr_dl = np.empty((M, 2, 3))
    for k, (e, p) in enumerate(((e1, p1), (e2, p2))):
        s = np.where(e >= 0, 1.0, -1.0)
        dr_dl[:, k, 0] = s * (p[:, 0] / ns - l[:, 0] * e / ns ** 3)
        dr_dl[:, k, 1] = s * (p[:, 1] / ns - l[:, 1] * e / ns ** 3)
        dr_dl[:, k, 2] = s / ns
    dr_dn = dr_dl @ P  # (M,2,3)
    J_pose = np.empty((M, 2, 6))
    J_pose[:, :, :3] = -dr_dn @ _skew_batch(v_c)
    J_pose[:, :, 3:] = -dr_dn @ _skew_batch(n_c)
    # d n_c / d (n_w, v_w) = [R, [t]x R]
    dr_dnw = dr_dn @ R
    dr_dvw = dr_dn @ (_skew_batch(tc) @ R)
    w1, w2 = np.cos(phi), np.sin(phi)
    u1, u2, u3 = U[:, :, 0], U[:, :, 1], U[:, :, 2]
    dL = np.zeros((M, 6, 4))
    dL[:, :3, 1] = -w1[:, None] * u3
    dL[:, :3, 2] = w1[:, None] * u2
    dL[:, :3, 3] = -w2[:, None] * u1
    dL[:, 3:, 0] = w2[:, None] * u3
    dL[:, 3:, 2] = -w2[:, None] * u1
    dL[:, 3:, 3] = w1[:, None] * u2
    J_line = np.concatenate([dr_dnw, dr_dvw], axis=2) @ dL
    return r, _offset_chain(J_pose, offsets), J_line


# ---------------------------------------------------------------------------
# Single-observation API

def _pose_arrays(pose):
    return pose.rotation[None], pose.translation[None]


def point_residual(X_world, pose, K, obs):
    R, t = _pose_arrays(pose)
    r = point_residuals(R, t, np.asarray(X_world, float)[None], np.asarray(obs, float)[None], K)[0]
    if not np.all(np.isfinite(r)):
        raise ProjectionError("point at or behind the camera")
    return PointResidual(r)


def line_residual(L_world, pose, K, obs):
    R, t = _pose_arrays(pose)
    r = line_residuals(R, t, L_world.n[None], L_world.v[None], obs.p1[None], obs.p2[None], K)[0]
    if not np.all(np.isfinite(r)):
        raise ProjectionError("line passes through the camera center")
    return LineResidual(r)


def point_residual_jacobians(X_world, pose, K, obs, offset=None):
    """``(J_pose (2,6), J_point (2,3))`` of :func:`point_residual`."""
    R, t = _pose_arrays(pose)
    off = None if offset is None else np.asarray(offset, float)[None]
    _, Jp, Jx = point_residuals(R, t, np.asarray(X_world, float)[None],
                                np.asarray(obs, float)[None], K, jacobians=True, offsets=off)
    return Jp[0], Jx[0]


def line_residual_jacobians(O, pose, K, obs, offset=None):
    """``(J_pose (2,6), J_line (2,4))`` of the line residual at orthonormal line ``O``."""
    R, t = _pose_arrays(pose)
    L = orthonormal_to_plucker(O)
    phi = np.arctan2(O.W[1, 0], O.W[0, 0])
    off = None if offset is None else np.asarray(offset, float)[None]
    _, Jp, Jl = line_residuals(R, t, L.n[None], L.v[None], obs.p1[None], obs.p2[None], K,
                               jacobians=True, U=O.U[None], phi=np.array([phi]), offsets=off)
    return Jp[0], Jl[0]


# ---------------------------------------------------------------------------
# Motion-only pose estimation

@dataclass
class PoseEstimate:
    pose: PoseSE3
    inliers: np.ndarray
    cost: float
    iterations: int


def _solve_pose(pose, X, uv, K, kernel, sigma, cfg, mask):
    R, t = pose.rotation.copy(), pose.translation.copy()
    Xm, uvm = X[mask], uv[mask]

    def evaluate(R, t, jac):
        Rs = np.broadcast_to(R, (len(Xm), 3, 3))
        ts = np.broadcast_to(t, (len(Xm), 3))
        return point_residuals(Rs, ts, Xm, uvm, K, jacobians=jac)

    def robust_cost(r):
        if not np.all(np.isfinite(r)):
            return np.inf
        return float(kernel.cost((r ** 2).sum(axis=1) / sigma ** 2).sum())

    lam = cfg.initial_damping
    r, J, _ = evaluate(R, t, True)
    cost = robust_cost(r)
    if not np.isfinite(cost):
        raise TrackingFailure("map points behind the predicted camera")
    it = 0
    while it < 2 * cfg.max_iterations:
        it += 1
        s = (r ** 2).sum(axis=1) / sigma ** 2
        w = kernel.weight(s) / sigma ** 2
        H = np.einsum("m,mki,mkj->ij", w, J, J)
        g = np.einsum("m,mki,mk->i", w, J, r)
        H_d = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
        try:
            delta = -np.linalg.solve(H_d, g)
        except np.linalg.LinAlgError:
            lam *= cfg.damping_up
            continue
        dR = so3_exp_batch(delta[3:])
        R_new, t_new = dR @ R, dR @ t + delta[:3]
        r_new = evaluate(R_new, t_new, False)
        new_cost = robust_cost(r_new)
        if new_cost < cost:
            decrease = (cost - new_cost) / max(cost, 1e-300)
            R, t, cost = R_new, t_new, new_cost
            lam = max(lam * cfg.damping_down, 1e-12)
            r, J, _ = evaluate(R, t, True)
            if decrease < cfg.relative_tolerance or cost < 1e-24:
                break
        else:
            lam *= cfg.damping_up
            if lam > 1e12:
                break
        if np.linalg.norm(delta) < 1e-14:
            break
    return PoseSE3(project_to_so3(R), t), cost, it


def estimate_pose(points3d, pixels, K, init_pose, cfg=OptimizerConfig()):
    """Robust motion-only pose from 2D-3D correspondences with one outlier-rejection pass."""
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(X) < 4:
        raise TrackingFailure(f"only {len(X)} map point matches")
    kernel, sigma = cfg.kernel, cfg.sigma_point
    mask = np.ones(len(X), dtype=bool)
    pose, cost, it1 = _solve_pose(init_pose, X, uv, K, kernel, sigma, cfg, mask)

    def gate(pose):
        Rs = np.broadcast_to(pose.rotation, (len(X), 3, 3))
        ts = np.broadcast_to(pose.translation, (len(X), 3))
        r = point_residuals(Rs, ts, X, uv, K)
        s = (r ** 2).sum(axis=1) / sigma ** 2
        return np.isfinite(s) & (s <= cfg.outlier_chi2)

    mask = gate(pose)
    if mask.sum() < 4:
        raise TrackingFailure("too few inliers after outlier rejection")
    pose, cost, it2 = _solve_pose(pose, X, uv, K, kernel, sigma, cfg, mask)
    if not np.all(np.isfinite(pose.translation)):
        raise TrackingFailure("pose estimate diverged")
    inliers = gate(pose)
    if inliers.sum() < 4:
        raise TrackingFailure("too few inliers after re-solve")
    return PoseEstimate(pose, inliers, cost, it1 + it2)


def initial_pose_estimate(frame, map_, last_pose, K, cfg=OptimizerConfig()):
    """Estimate ``frame``'s pose from its tentatively linked map points.

    Reads ``frame.point_ids``; outlier links are reset to -1 and
    ``frame.tracked_map_point_count`` is set to the inlier count.
    """
    idx = np.nonzero(frame.point_ids >= 0)[0]
    X = np.array([map_.points[int(frame.point_ids[i])].position for i in idx]).reshape(-1, 3)
    est = estimate_pose(X, frame.keypoints[idx], K, last_pose, cfg)
    frame.point_ids[idx[~est.inliers]] = -1
    frame.pose = est.pose
    frame.tracked_map_point_count = int(est.inliers.sum())
    return est


# ---------------------------------------------------------------------------
# Bundle adjustment

@dataclass
class BundleProblem:
    """Stacked observations over a set of poses, points and lines.

    Observation rows reference a pose index, a landmark index and an optional
    camera offset (``X_cam = R X + t + offset``); offsets of zero denote the
    body (left) camera.
    """

    K: object
    poses: list
    fixed: np.ndarray
    points: np.ndarray
    lines: list
    pt_pose: np.ndarray
    pt_index: np.ndarray
    pt_obs: np.ndarray
    pt_offset: np.ndarray
    ln_pose: np.ndarray = None
    ln_index: np.ndarray = None
    ln_obs: np.ndarray = None  # (M, 2, 2): both endpoints
    ln_offset: np.ndarray = None

    def __post_init__(self):
        self.fixed = np.asarray(self.fixed, dtype=bool)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.pt_pose = np.asarray(self.pt_pose, dtype=int)
        self.pt_index = np.asarray(self.pt_index, dtype=int)
        self.pt_obs = np.asarray(self.pt_obs, dtype=float).reshape(-1, 2)
        self.pt_offset = np.asarray(self.pt_offset, dtype=float).reshape(-1, 3)
        if self.ln_pose is None:
            self.ln_pose = np.zeros(0, dtype=int)
            self.ln_index = np.zeros(0, dtype=int)
            self.ln_obs = np.zeros((0, 2, 2))
            self.ln_offset = np.zeros((0, 3))
        self.ln_pose = np.asarray(self.ln_pose, dtype=int)
        self.ln_index = np.asarray(self.ln_index, dtype=int)
        self.ln_obs = np.asarray(self.ln_obs, dtype=float).reshape(-1, 2, 2)
        self.ln_offset = np.asarray(self.ln_offset, dtype=float).reshape(-1, 3)


@dataclass
class BundleResult:
    poses: list
    points: np.ndarray
    lines: list
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_costs: list = field(default_factory=list)
    history: list = field(default_factory=list)  # (iteration, cost, damping, accepted)
    aborted: bool = False


class _State:
    def __init__(self, R, t, X, U, phi):
        self.R, self.t, self.X, self.U, self.phi = R, t, X, U, phi


def _evaluate(prob, st, cfg, jacobians):
    out = {}
    Rp, tp = st.R[prob.pt_pose], st.t[prob.pt_pose]
    res = point_residuals(Rp, tp, st.X[prob.pt_index], prob.pt_obs, prob.K,
                          jacobians=jacobians, offsets=prob.pt_offset)
    out["pt"] = res
    if cfg.use_lines and len(prob.ln_pose):
        Rl, tl = st.R[prob.ln_pose], st.t[prob.ln_pose]
        U, phi = st.U[prob.ln_index], st.phi[prob.ln_index]
        n_w, v_w = _orthonormal_plucker_batch(U, phi)
        res = line_residuals(Rl, tl, n_w, v_w, prob.ln_obs[:, 0], prob.ln_obs[:, 1], prob.K,
                             jacobians=jacobians, U=U, phi=phi, offsets=prob.ln_offset)
        out["ln"] = res
    return out


def _robust_terms(r, sigma, kernel):
    s = (r ** 2).sum(axis=1) / sigma ** 2
    return s, kernel.cost(s)


def _total_cost(res, cfg):
    kernel = cfg.kernel
    total = 0.0
    for key, sigma in (("pt", cfg.sigma_point), ("ln", cfg.sigma_line)):
        if key not in res:
            continue
        r = res[key][0] if isinstance(res[key], tuple) else res[key]
        if not np.all(np.isfinite(r)):
            return np.inf
        total += float(_robust_terms(r, sigma, kernel)[1].sum())
    return total


def _accumulate(r, J_pose, J_lm, pose_idx, lm_idx, n_lm, dim, slot, n_free, w):
    """Normal-equation blocks for one landmark type."""
    WJl = (w[:, None, None] * J_lm).transpose(0, 2, 1)
    H_ll = np.zeros((n_lm, dim, dim))
    g_l = np.zeros((n_lm, dim))
    np.add.at(H_ll, lm_idx, WJl @ J_lm)
    np.add.at(g_l, lm_idx, (WJl @ r[..., None])[..., 0])
    H_pp = np.zeros((n_free, 6, 6))
    g_p = np.zeros((n_free, 6))
    H_pl = np.zeros((n_free, n_lm, 6, dim))
    a = slot[pose_idx]
    free = a >= 0
    if free.any():
        af, lf = a[free], lm_idx[free]
        WJp = (w[free, None, None] * J_pose[free]).transpose(0, 2, 1)
        np.add.at(H_pp, af, WJp @ J_pose[free])
        np.add.at(g_p, af, (WJp @ r[free][..., None])[..., 0])
        np.add.at(H_pl, (af, lf), WJp @ J_lm[free])
    return H_pp, g_p, H_ll, g_l, H_pl


def _damp(H, lam):
    d = np.diagonal(H, axis1=-2, axis2=-1)
    return H + lam * np.einsum("...i,ij->...ij", np.maximum(d, 1e-9), np.eye(H.shape[-1]))


def _solve_step(blocks, n_free, lam):
    """Schur-complement solve of the damped normal equations."""
    H_pp = np.zeros((n_free, 6, 6))
    g_p = np.zeros((n_free, 6))
    for b in blocks:
        H_pp += b[0]
        g_p += b[1]
    S = np.zeros((n_free, 6, n_free, 6))
    for a in range(n_free):
        S[a, :, a, :] = _damp(H_pp[a], lam)
    rhs = -g_p.copy()
    Cinvs = []
    for _, _, H_ll, g_l, H_pl in blocks:
        Cinv = np.linalg.inv(_damp(H_ll, lam))
        Cinvs.append(Cinv)
        if n_free:
            Y = np.einsum("ajxk,jkl->ajxl", H_pl, Cinv)
            # sum over landmarks j as one matrix product: (a x, j l) @ (j l, b y)
            Yf = Y.transpose(0, 2, 1, 3).reshape(6 * n_free, -1)
            Hf = H_pl.transpose(0, 2, 1, 3).reshape(6 * n_free, -1)
            S -= (Yf @ Hf.T).reshape(n_free, 6, n_free, 6)
            rhs += (Yf @ g_l.reshape(-1)).reshape(n_free, 6)
    if n_free:
        dp = np.linalg.solve(S.reshape(6 * n_free, 6 * n_free), rhs.reshape(-1)).reshape(n_free, 6)
    else:
        dp = np.zeros((0, 6))
    dls = []
    for (_, _, H_ll, g_l, H_pl), Cinv in zip(blocks, Cinvs):
        b = -g_l
        if n_free:
            b = b - np.einsum("ajxl,ax->jl", H_pl, dp)
        dls.append(np.einsum("jkl,jl->jk", Cinv, b))
    return dp, dls


def bundle_adjust(prob, cfg=OptimizerConfig()):
    """Huber-robust Levenberg-Marquardt over free poses, points and orthonormal lines."""
    kernel = cfg.kernel
    use_lines = cfg.use_lines and len(prob.ln_pose) > 0
    R0 = np.array([p.rotation for p in prob.poses]).reshape(-1, 3, 3)
    t0 = np.array([p.translation for p in prob.poses]).reshape(-1, 3)
    U0 = np.array([o.U for o in prob.lines]).reshape(-1, 3, 3)
    phi0 = np.array([np.arctan2(o.W[1, 0], o.W[0, 0]) for o in prob.lines])
    st = _State(R0.copy(), t0.copy(), prob.points.copy(), U0.copy(), phi0.copy())

    slot = np.full(len(prob.poses), -1, dtype=int)
    free_idx = np.nonzero(~prob.fixed)[0]
    slot[free_idx] = np.arange(len(free_idx))
    n_free = len(free_idx)

    res = _evaluate(prob, st, cfg, True)
    cost = _total_cost(res, cfg)
    initial_cost = cost
    history, accepted = [(0, cost, cfg.initial_damping, True)], [cost]
    lam = cfg.initial_damping
    it = 0
    aborted = False
    if not np.isfinite(cost):
        aborted = True
    while not aborted and it < cfg.max_iterations and cost > 1e-30:
        it += 1
        blocks = []
        r, Jp, Jx = res["pt"]
        s = (r ** 2).sum(axis=1) / cfg.sigma_point ** 2
        w = kernel.weight(s) / cfg.sigma_point ** 2
        blocks.append(_accumulate(r, Jp, Jx, prob.pt_pose, prob.pt_index,
                                  len(st.X), 3, slot, n_free, w))
        if use_lines:
            r, Jp, Jl = res["ln"]
            s = (r ** 2).sum(axis=1) / cfg.sigma_line ** 2
            w = kernel.weight(s) / cfg.sigma_line ** 2
            blocks.append(_accumulate(r, Jp, Jl, prob.ln_pose, prob.ln_index,
                                      len(st.U), 4, slot, n_free, w))
        try:
            dp, dls = _solve_step(blocks, n_free, lam)
            ok = all(np.all(np.isfinite(d)) for d in [dp] + dls)
        except np.linalg.LinAlgError:
            ok = False
        if not ok:
            lam *= cfg.damping_up
            history.append((it, cost, lam, False))
            if lam > 1e12:
                aborted = True
            continue
        step = np.sqrt(sum(float((d ** 2).sum()) for d in [dp] + dls))
        scale = np.sqrt(float((st.t ** 2).sum() + (st.X ** 2).sum() + (st.phi ** 2).sum()))
        negligible = step <= cfg.step_tolerance * (scale + cfg.step_tolerance)
        new = _State(st.R.copy(), st.t.copy(), st.X + dls[0], st.U, st.phi)
        if n_free:
            dR = so3_exp_batch(dp[:, 3:])
            new.R[free_idx] = dR @ st.R[free_idx]
            new.t[free_idx] = np.einsum("aij,aj->ai", dR, st.t[free_idx]) + dp[:, :3]
        if use_lines:
            new.U = st.U @ so3_exp_batch(dls[1][:, :3])
            new.phi = st.phi + dls[1][:, 3]
        new_res = _evaluate(prob, new, cfg, False)
        new_cost = _total_cost(new_res, cfg)
        if new_cost < cost:
            decrease = (cost - new_cost) / cost
            st, cost = new, new_cost
            lam = max(lam * cfg.damping_down, 1e-12)
            history.append((it, cost, lam, True))
            accepted.append(cost)
            if decrease < cfg.relative_tolerance or negligible:
                break
            res = _evaluate(prob, st, cfg, True)
        else:
            lam *= cfg.damping_up
            history.append((it, new_cost, lam, False))
            if lam > 1e12 or negligible:
                break

    if aborted:
        st = _State(R0, t0, prob.points.copy(), U0, phi0)
        cost = initial_cost
        log.warning("bundle adjustment aborted; restoring initial state")
    poses = [PoseSE3(project_to_so3(R), t) for R, t in zip(st.R, st.t)]
    lines = [OrthonormalLine(project_to_so3(U), rot2(p)) for U, p in zip(st.U, st.phi)]
    return BundleResult(poses, st.X, lines, initial_cost, cost, it, accepted, history, aborted)


def _n_views(rows):
    return len({slot for slot, _, _ in rows})


def _max_plane_angle(rows, poses, K):
    """Largest angle between the back-projection planes of a line's observations."""
    N = []
    for slot, (p1, p2), _ in rows:
        rays = K.ray(np.stack([p1, p2]))
        N.append(poses[slot].rotation.T @ np.cross(rays[0], rays[1]))
    N = np.array(N)
    N /= np.linalg.norm(N, axis=1, keepdims=True)
    c = np.abs(N @ N.T).min()
    return float(np.arccos(min(1.0, c)))


def build_window_problem(map_, window, rig, cfg=OptimizerConfig()):
    """Collect window keyframes and the landmarks observed by at least two of them.

    Right-image observations of those landmarks are added as extra rows. Lines
    also need a third row so that they are over-determined.

    Returns ``(problem, keyframe_ids, point_ids, line_ids)``; the oldest keyframe is frozen.
    Lines through the world origin have no orthonormal form and are left out.
    """
    K = rig.intrinsics
    kf_ids = sorted(window)
    pose_slot = {k: i for i, k in enumerate(kf_ids)}
    off_right = rig.right_offset

    pt_rows = {}
    for k in kf_ids:
        kf = map_.keyframes[k]
        for i in np.nonzero(kf.point_ids >= 0)[0]:
            pid = int(kf.point_ids[i])
            rows = pt_rows.setdefault(pid, [])
            rows.append((pose_slot[k], kf.keypoints[i], np.zeros(3)))
            if np.all(np.isfinite(kf.keypoints_right[i])):
                rows.append((pose_slot[k], kf.keypoints_right[i], off_right))
    point_ids = sorted(pid for pid, rows in pt_rows.items() if _n_views(rows) >= 2)
    pt_pose, pt_index, pt_obs, pt_off = [], [], [], []
    for j, pid in enumerate(point_ids):
        for slot, uv, off in pt_rows[pid]:
            pt_pose.append(slot)
            pt_index.append(j)
            pt_obs.append(uv)
            pt_off.append(off)

    line_ids, lines = [], []
    ln_pose, ln_index, ln_obs, ln_off = [], [], [], []
    if cfg.use_lines:
        poses = [map_.keyframes[k].pose for k in kf_ids]
        ln_rows = {}
        for k in kf_ids:
            kf = map_.keyframes[k]
            for i in np.nonzero(kf.line_ids >= 0)[0]:
                lid = int(kf.line_ids[i])
                rows = ln_rows.setdefault(lid, [])
                seg = kf.segments[i]
                rows.append((pose_slot[k], (seg.p1, seg.p2), np.zeros(3)))
                j = kf.stereo_line_matches.get(int(i))
                if j is not None:
                    sr = kf.segments_right[j]
                    rows.append((pose_slot[k], (sr.p1, sr.p2), off_right))
        for lid in sorted(ln_rows):
            rows = ln_rows[lid]
            L = map_.lines[lid].line
            # two rows fit any 4-DoF line exactly: no information, only slower LM
            if _n_views(rows) < 2 or len(rows) < 3 or np.linalg.norm(L.n) < 1e-12:
                continue
            # near-coplanar planes leave the line depth to the noise: slow, harmful LM directions
            if _max_plane_angle(rows, poses, K) < cfg.min_line_parallax:
                continue
            jj = len(line_ids)
            line_ids.append(lid)
            lines.append(plucker_to_orthonormal(L))
            for slot, ends, off in rows:
                ln_pose.append(slot)
                ln_index.append(jj)
                ln_obs.append(ends)
                ln_off.append(off)

    fixed = np.zeros(len(kf_ids), dtype=bool)
    fixed[0] = True
    prob = BundleProblem(
        K, [map_.keyframes[k].pose for k in kf_ids], fixed,
        np.array([map_.points[p].position for p in point_ids]).reshape(-1, 3), lines,
        pt_pose, pt_index, pt_obs, pt_off,
        np.array(ln_pose, dtype=int), np.array(ln_index, dtype=int),
        np.array(ln_obs, dtype=float).reshape(-1, 2, 2), np.array(ln_off, dtype=float).reshape(-1, 3))
    return prob, kf_ids, point_ids, line_ids


def local_bundle_adjustment(map_, window, rig, cfg=OptimizerConfig()):
    """Optimize window keyframe poses, points and lines in place; returns the :class:`BundleResult`."""
    prob, kf_ids, point_ids, line_ids = build_window_problem(map_, window, rig, cfg)
    if len(prob.pt_pose) == 0 and len(prob.ln_pose) == 0:
        return None
    result = bundle_adjust(prob, cfg)
    if result.aborted:
        return result
    for k, pose in zip(kf_ids, result.poses):
        map_.keyframes[k].pose = pose
    for pid, X in zip(point_ids, result.points):
        map_.points[pid].position = X.copy()
    for lid, O in zip(line_ids, result.lines):
        map_.lines[lid].line = orthonormal_to_plucker(O).normalized()
    return result


def reject_window_outliers(map_, window, rig, cfg=OptimizerConfig()):
    """Unlink point and line observations whose squared residual exceeds the chi-square gate.

    Returns the number of observations removed.
    """
    K = rig.intrinsics
    removed = 0
    for k in sorted(window):
        kf = map_.keyframes[k]
        R, t = kf.pose.rotation, kf.pose.translation
        idx = np.nonzero(kf.point_ids >= 0)[0]
        if len(idx):
            X = np.array([map_.points[int(kf.point_ids[i])].position for i in idx])
            r = point_residuals(np.broadcast_to(R, (len(idx), 3, 3)),
                                np.broadcast_to(t, (len(idx), 3)), X, kf.keypoints[idx], K)
            s = (r ** 2).sum(axis=1) / cfg.sigma_point ** 2
            for i in idx[~(np.isfinite(s) & (s <= cfg.outlier_chi2))]:
                map_.remove_point_observation(int(kf.point_ids[i]), k)
                removed += 1
        idx = np.nonzero(kf.line_ids >= 0)[0]
        if cfg.use_lines and len(idx):
            Ls = [map_.lines[int(kf.line_ids[j])].line for j in idx]
            segs = [kf.segments[j] for j in idx]
            r = line_residuals(np.broadcast_to(R, (len(idx), 3, 3)),
                               np.broadcast_to(t, (len(idx), 3)),
                               np.array([L.n for L in Ls]), np.array([L.v for L in Ls]),
                               np.array([sg.p1 for sg in segs]), np.array([sg.p2 for sg in segs]), K)
            s = (r ** 2).sum(axis=1) / cfg.sigma_line ** 2
            for j in idx[~(np.isfinite(s) & (s <= cfg.outlier_chi2))]:
                lid = int(kf.line_ids[j])
                map_.remove_line_observation(lid, k)
                kf.stereo_line_matches.pop(int(j), None)
                removed += 1
    return removed


def write_cost_log(path, history):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "cost", "damping", "accepted"])
        for it, cost, lam, acc in history:
            w.writerow([it, repr(float(cost)), repr(float(lam)), int(acc)])
