"""Classical two-view and multi-view geometry.

Normalized eight-point fundamental matrix, essential matrix decomposition with
a cheirality vote, RANSAC, DLT triangulation and a Levenberg-Marquardt bundle
adjustment in the normalized gauge. These provide the initialization of the
probabilistic estimator and the baselines it is compared against.

Correspondences are passed as two ``(n, 2)`` pixel arrays ``pts_a``/``pts_b``.
Relative poses map camera-a coordinates to camera-b coordinates:
``x_b = R @ x_a + t``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCamera,
    CheiralityAmbiguous,
    DegenerateConfiguration,
    InsufficientInliers,
    ParallelRays,
    SingularNormalEquations,
)
from .geometry import (
    DEPTH_EPS,
    CameraPose,
    CameraRig,
    Intrinsics,
    normalize_rig,
    quat_from_rotvec,
    quat_multiply,
    quat_to_rotmat,
)

log = logging.getLogger(__name__)

_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 200
    inlier_threshold: float = 2.0
    min_inliers: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.inlier_threshold <= 0 or self.min_inliers < 1:
            raise ValueError("invalid RANSAC parameters")


@dataclass(frozen=True)
class LmParams:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    convergence_tol: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 1 or self.initial_damping <= 0 or self.convergence_tol <= 0:
            raise ValueError("invalid LM parameters")


def _as_pts(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError("expected (n, 2) pixel array")
    return p


def _hartley(p):
    c = p.mean(axis=0)
    d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T


def homogeneous(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)


# ---------------------------------------------------------------------------
# Two-view estimation
# ---------------------------------------------------------------------------

def eight_point_fundamental(pts_a, pts_b) -> np.ndarray:
    """Normalized eight-point estimate of ``F`` with ``x_b^T F x_a = 0``.

    The result has rank 2 and unit Frobenius norm. Raises
    :class:`DegenerateConfiguration` when the linear system has more than a
    one-dimensional null space (e.g. pure rotation or too few points).
    """
    pa, pb = _as_pts(pts_a), _as_pts(pts_b)
    if len(pa) < 8 or len(pa) != len(pb):
        raise DegenerateConfiguration("need at least 8 matched points")
    Ta, Tb = _hartley(pa), _hartley(pb)
    xa = homogeneous(pa) @ Ta.T
    xb = homogeneous(pb) @ Tb.T
    A = (xb[:, :, None] * xa[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s = np.concatenate([s, np.zeros(9 - len(s))])
    if s[7] < 1e-9 * s[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    F = Vt[-1].reshape(3, 3)
    U, sf, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([sf[0], sf[1], 0.0]) @ Vt2
    F = Tb.T @ F @ Ta
    return F / np.linalg.norm(F)


def essential_from_fundamental(F, intr_a: Intrinsics, intr_b: Intrinsics) -> np.ndarray:
    """``E = K_b^T F K_a`` projected onto the essential manifold (s, s, 0)."""
    E = intr_b.K.T @ np.asarray(F, dtype=np.float64) @ intr_a.K
    U, s, Vt = np.linalg.svd(E)
    m = 0.5 * (s[0] + s[1])
    return U @ np.diag([m, m, 0.0]) @ Vt


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_two_view(R, t, na, nb) -> np.ndarray:
    """Linear triangulation from normalized image coordinates; camera a at the origin."""
    n = len(na)
    P_a = np.hstack([np.eye(3), np.zeros((3, 1))])
    P_b = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.empty((n, 4, 4))
    A[:, 0] = na[:, 0:1] * P_a[2] - P_a[0]
    A[:, 1] = na[:, 1:2] * P_a[2] - P_a[1]
    A[:, 2] = nb[:, 0:1] * P_b[2] - P_b[0]
    A[:, 3] = nb[:, 1:2] * P_b[2] - P_b[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1]
    w = np.where(np.abs(X[:, 3]) > 1e-300, X[:, 3], 1e-300)
    return X[:, :3] / w[:, None]


def decompose_essential(E, pts_a, pts_b, intr_a: Intrinsics, intr_b: Intrinsics) -> CameraPose:
    """Pick the (R, t) candidate that places most points in front of both cameras."""
    na = intr_a.to_normalized(_as_pts(pts_a))
    nb = intr_b.to_normalized(_as_pts(pts_b))
    counts = []
    cands = essential_candidates(E)
    for R, t in cands:
        X = triangulate_two_view(R, t, na, nb)
        za = X[:, 2]
        zb = X @ R[2] + t[2]
        counts.append(int(np.sum((za > DEPTH_EPS) & (zb > DEPTH_EPS))))
    best = int(np.argmax(counts))
    if counts[best] * 2 <= len(na):
        raise CheiralityAmbiguous(f"best cheirality count {counts[best]} of {len(na)}")
    R, t = cands[best]
    return CameraPose.from_rt(R, t / np.linalg.norm(t))


def symmetric_epipolar_distance(F, pts_a, pts_b) -> np.ndarray:
    """RMS of the point-to-epipolar-line distances in both images (pixels)."""
    xa = homogeneous(pts_a)
    xb = homogeneous(pts_b)
    la = xa @ F.T      # lines in image b
    lb = xb @ F        # lines in image a
    r = np.sum(xb * la, axis=1)
    da2 = r**2 / np.maximum(lb[:, 0] ** 2 + lb[:, 1] ** 2, 1e-300)
    db2 = r**2 / np.maximum(la[:, 0] ** 2 + la[:, 1] ** 2, 1e-300)
    return np.sqrt(0.5 * (da2 + db2))


def ransac_eight_point(pts_a, pts_b, intr_a: Intrinsics, intr_b: Intrinsics,
                       params: RansacParams = RansacParams()):
    """Robust relative pose: RANSAC over eight-point models, refit on the inliers.

    Returns ``(pose, inlier_mask)`` where ``pose`` maps camera a to camera b
    with unit-norm translation.
    """
    pa, pb = _as_pts(pts_a), _as_pts(pts_b)
    n = len(pa)
    if n < 8:
        raise DegenerateConfiguration("need at least 8 correspondences")
    rng = np.random.default_rng(params.seed)
    subsets = np.stack([rng.choice(n, 8, replace=False) for _ in range(params.iterations)])
    best_mask, best_count = None, -1
    for idx in subsets:
        try:
            F = eight_point_fundamental(pa[idx], pb[idx])
        except DegenerateConfiguration:
            continue
        mask = symmetric_epipolar_distance(F, pa, pb) < params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
    if best_count < params.min_inliers:
        raise InsufficientInliers(f"best model has {max(best_count, 0)} inliers (< {params.min_inliers})")
    F = eight_point_fundamental(pa[best_mask], pb[best_mask])
    E = essential_from_fundamental(F, intr_a, intr_b)
    pose = decompose_essential(E, pa[best_mask], pb[best_mask], intr_a, intr_b)
    return pose, best_mask


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def triangulate_dlt(poses, intrs, pixels, check_cheirality: bool = True) -> np.ndarray:
    """Homogeneous least-squares (DLT) triangulation of one point from >= 2 views."""
    px = np.asarray(pixels, dtype=np.float64)
    if len(poses) < 2 or len(poses) != len(px) or len(intrs) != len(px):
        raise ValueError("need matching poses, intrinsics and pixels for >= 2 views")
    rows = []
    for pose, intr, (u, v) in zip(poses, intrs, px):
        P = intr.K @ np.hstack([pose.R, pose.translation[:, None]])
        r1 = u * P[2] - P[0]
        r2 = v * P[2] - P[1]
        rows += [r1 / np.linalg.norm(r1), r2 / np.linalg.norm(r2)]
    _, s, Vt = np.linalg.svd(np.array(rows))
    if s[2] < 1e-9 * s[0]:
        raise ParallelRays("views provide no baseline for this point")
    X = Vt[-1]
    if abs(X[3]) < 1e-300:
        raise ParallelRays("point at infinity")
    X = X[:3] / X[3]
    if check_cheirality:
        for pose in poses:
            if pose.to_camera(X)[2] <= DEPTH_EPS:
                raise BehindCamera("triangulated point is behind a camera")
    return X


def triangulate_points(rig: CameraRig, pixels, mask=None) -> np.ndarray:
    """Batch DLT triangulation.

    ``pixels`` is ``(K, P, 2)``; ``mask`` (``(K, P)`` bool) selects which views
    observe each point. Points seen by fewer than two views come back as NaN.
    No cheirality checks are made.
    """
    px = np.asarray(pixels, dtype=np.float64)
    K, P = px.shape[:2]
    if mask is None:
        mask = np.all(np.isfinite(px), axis=-1)
    Ps = [intr.K @ np.hstack([p.R, p.translation[:, None]]) for p, intr in zip(rig.poses, rig.intrinsics)]
    A = np.zeros((P, 2 * K, 4))
    for k in range(K):
        u = np.nan_to_num(px[k, :, 0:1])
        v = np.nan_to_num(px[k, :, 1:2])
        r1 = u * Ps[k][2] - Ps[k][0]
        r2 = v * Ps[k][2] - Ps[k][1]
        r1 /= np.linalg.norm(r1, axis=1, keepdims=True)
        r2 /= np.linalg.norm(r2, axis=1, keepdims=True)
        m = mask[k][:, None]
        A[:, 2 * k] = np.where(m, r1, 0.0)
        A[:, 2 * k + 1] = np.where(m, r2, 0.0)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = X[:, :3] / X[:, 3:4]
    out[mask.sum(axis=0) < 2] = np.nan
    return out


# ---------------------------------------------------------------------------
# Multi-camera initialization
# ---------------------------------------------------------------------------

def assemble_rig(relative_poses, inlier_masks, pixels, intrinsics) -> CameraRig:
    """Chain pairwise poses (each view relative to view 0) into one rig.

    ``relative_poses[k-1]`` maps view 0 to view ``k`` with unit translation.
    View 1 fixes the scale; landmarks triangulated from views (0, 1) give each
    further view its translation scale by 1-DOF least squares on the
    cross-product constraint ``m_k x (R_k X + s t_k) = 0``.
    """
    px = np.asarray(pixels, dtype=np.float64)
    poses = [CameraPose.identity(), relative_poses[0]]
    na = intrinsics[0].to_normalized(px[0])
    n1 = intrinsics[1].to_normalized(px[1])
    X = triangulate_two_view(relative_poses[0].R, relative_poses[0].translation, na, n1)
    good01 = inlier_masks[0] & (X[:, 2] > DEPTH_EPS) & ((X @ relative_poses[0].R[2] + relative_poses[0].translation[2]) > DEPTH_EPS)
    for k in range(2, len(px)):
        rel = relative_poses[k - 1]
        good = good01 & inlier_masks[k - 1]
        if good.sum() < 1:
            raise DegenerateConfiguration(f"no shared inliers to fix the scale of view {k}")
        m = homogeneous(intrinsics[k].to_normalized(px[k][good]))
        RX = X[good] @ rel.R.T
        a = np.cross(m, rel.translation)
        b = -np.cross(m, RX)
        scale = float(np.sum(a * b) / np.sum(a * a))
        if scale <= 0:
            log.info("view %d scale came out non-positive (%.3g)", k, scale)
        poses.append(CameraPose(rel.rotation, scale * rel.translation))
    rig, _ = normalize_rig(CameraRig(poses, intrinsics))
    return rig


# ---------------------------------------------------------------------------
# Bundle adjustment
# ---------------------------------------------------------------------------

def _tangent_basis(t):
    t = t / np.linalg.norm(t)
    helper = np.eye(3)[int(np.argmin(np.abs(t)))]
    b1 = np.cross(t, helper)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=1)


class _BAProblem:
    """Residuals and analytic Jacobian for gauge-fixed bundle adjustment."""

    def __init__(self, intrinsics, observations):
        obs = np.asarray(observations, dtype=np.float64)
        self.K, self.P = obs.shape[:2]
        self.obs = obs
        self.mask = np.all(np.isfinite(obs), axis=-1)
        self.f = np.array([[i.fx, i.fy] for i in intrinsics])
        self.c = np.array([[i.cx, i.cy] for i in intrinsics])
        K = self.K
        self.n_cam = 3 * (K - 1) + 2 + 3 * (K - 2)
        self.n = self.n_cam + 3 * self.P

    def residuals(self, quats, ts, X):
        R = quat_to_rotmat(quats)
        cam = np.einsum("kij,pj->kpi", R, X) + ts[:, None, :]
        z = cam[..., 2]
        z = np.where(np.abs(z) > 1e-12, z, 1e-12)
        uv = self.f[:, None, :] * cam[..., :2] / z[..., None] + self.c[:, None, :]
        r = np.where(self.mask[..., None], uv - self.obs, 0.0)
        return r, cam, R, z

    def cost(self, quats, ts, X) -> float:
        r = self.residuals(quats, ts, X)[0]
        return float(np.sum(r * r))

    def jacobian(self, quats, ts, X):
        """Residuals, camera Jacobian ``(K, P, 2, n_cam)`` and point Jacobian ``(K, P, 2, 3)``."""
        r, cam, R, z = self.residuals(quats, ts, X)
        K, P = self.K, self.P
        fx, fy = self.f[:, 0][:, None], self.f[:, 1][:, None]
        Jp = np.zeros((K, P, 2, 3))
        Jp[..., 0, 0] = fx / z
        Jp[..., 0, 2] = -fx * cam[..., 0] / z**2
        Jp[..., 1, 1] = fy / z
        Jp[..., 1, 2] = -fy * cam[..., 1] / z**2
        Jp[~self.mask] = 0.0
        Jc = np.zeros((K, P, 2, self.n_cam))
        RX = cam - ts[:, None, :]
        col = 0
        for k in range(1, K):
            # left-multiplied rotation increment: d(RX)/dtheta = -[RX]x
            S = np.zeros((P, 3, 3))
            x, y, w = RX[k, :, 0], RX[k, :, 1], RX[k, :, 2]
            S[:, 0, 1], S[:, 0, 2] = w, -y
            S[:, 1, 0], S[:, 1, 2] = -w, x
            S[:, 2, 0], S[:, 2, 1] = y, -x
            Jc[k, :, :, col:col + 3] = Jp[k] @ S
            col += 3
        Jc[1, :, :, col:col + 2] = Jp[1] @ _tangent_basis(ts[1])
        col += 2
        for k in range(2, K):
            Jc[k, :, :, col:col + 3] = Jp[k]
            col += 3
        JX = np.einsum("kpij,kjl->kpil", Jp, R)
        return r, Jc, JX

    def normal_equations(self, quats, ts, X):
        r, Jc, JX = self.jacobian(quats, ts, X)
        Hcc = np.einsum("kpia,kpib->ab", Jc, Jc)
        Hcp = np.einsum("kpia,kpib->pab", Jc, JX)
        Hpp = np.einsum("kpia,kpib->pab", JX, JX)
        gc = np.einsum("kpia,kpi->a", Jc, r)
        gp = np.einsum("kpia,kpi->pa", JX, r)
        return Hcc, Hcp, Hpp, gc, gp

    @staticmethod
    def solve(Hcc, Hcp, Hpp, gc, gp, lam):
        """Damped step via the Schur complement on the 3x3 point blocks."""
        dc = np.diag(Hcc)
        dc = np.maximum(dc, 1e-12 * max(1.0, dc.max()))
        A = Hcc + lam * np.diag(dc)
        dp = np.einsum("pii->pi", Hpp)
        dp = np.maximum(dp, 1e-12 * max(1.0, dp.max()))
        V = Hpp + lam * dp[:, :, None] * np.eye(3)
        Vinv = np.linalg.inv(V)
        W = np.einsum("pab,pbc->pac", Hcp, Vinv)
        S = A - np.einsum("pab,pcb->ac", W, Hcp)
        rhs = -gc + np.einsum("pab,pb->a", W, gp)
        delta_c = np.linalg.solve(S, rhs)
        delta_p = -np.einsum("pab,pb->pa", Vinv, gp + np.einsum("pab,a->pb", Hcp, delta_c))
        return np.concatenate([delta_c, delta_p.reshape(-1)])

    def step(self, quats, ts, X, delta):
        K = self.K
        quats, ts = quats.copy(), ts.copy()
        col = 0
        for k in range(1, K):
            quats[k] = quat_multiply(quat_from_rotvec(delta[col:col + 3]), quats[k])
            quats[k] /= np.linalg.norm(quats[k])
            col += 3
        t1 = ts[1] + _tangent_basis(ts[1]) @ delta[col:col + 2]
        ts[1] = t1 / np.linalg.norm(t1)
        col += 2
        for k in range(2, K):
            ts[k] = ts[k] + delta[col:col + 3]
            col += 3
        X = X + delta[col:].reshape(-1, 3)
        return quats, ts, X


def bundle_adjust_lm(init_rig: CameraRig, observations, init_points,
                     params: LmParams = LmParams(), callback=None):
    """Levenberg-Marquardt minimization of the summed squared reprojection error.

    ``observations`` is ``(K, P, 2)`` (NaN marks a missing observation) and
    ``init_points`` ``(P, 3)``. Camera 0 is frozen and camera 1's translation
    stays unit-norm (only its direction moves), so the gauge is preserved.
    Cameras and points are optimized jointly. ``callback(iteration, cost)``
    fires after every accepted step.

    Returns ``(rig, points, final_cost)``.
    """
    if not init_rig.is_normalized(1e-6):
        raise ValueError("bundle adjustment expects a rig in the normalized gauge")
    prob = _BAProblem(init_rig.intrinsics, observations)
    quats = init_rig.rotations.copy()
    ts = init_rig.translations.copy()
    X = np.array(init_points, dtype=np.float64).reshape(-1, 3)
    if len(X) != prob.P or prob.K != len(init_rig):
        raise ValueError("observations do not match rig/points")
    cost = prob.cost(quats, ts, X)
    lam = params.initial_damping
    accepted = 0
    for it in range(params.max_iterations):
        if cost <= 1e-24:
            break
        Hcc, Hcp, Hpp, gc, gp = prob.normal_equations(quats, ts, X)
        gnorm = max(np.abs(gc).max(initial=0.0), np.abs(gp).max(initial=0.0))
        if gnorm <= params.convergence_tol * max(1.0, cost):
            break
        improved = False
        while lam <= 1e12:
            try:
                delta = prob.solve(Hcc, Hcp, Hpp, gc, gp, lam)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            nq, nt, nX = prob.step(quats, ts, X, delta)
            new_cost = prob.cost(nq, nt, nX)
            if np.isfinite(new_cost) and new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                quats, ts, X, cost = nq, nt, nX, new_cost
                lam = max(lam / 10.0, 1e-15)
                improved = True
                accepted += 1
                if callback is not None:
                    callback(it, cost)
                break
            lam *= 10.0
        if not improved:
            if accepted == 0 and cost > 1e-24:
                raise SingularNormalEquations("damping exceeded 1e12 without progress")
            break
        if rel < params.convergence_tol:
            break
    rig = init_rig.with_poses([CameraPose(q, t) for q, t in zip(quats, ts)])
    return rig, X, cost
