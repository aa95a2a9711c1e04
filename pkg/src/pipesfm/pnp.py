"""Absolute pose: Grunert's P3P inside RANSAC, then robust refinement."""
from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics, project, unproject
from .geometry import kabsch, skew, so3_exp
from .lm import Problem, SolverOptions, solve


class RegistrationError(ValueError):
    pass


def p3p(world, rays):
    """All P3P poses for batches of three correspondences.

    ``world`` and ``rays`` are (B, 3, 3) (three points per batch, rays unit
    norm). Returns ``R (B, 4, 3, 3)``, ``t (B, 4, 3)`` and a validity mask
    ``(B, 4)``; invalid slots hold identity poses.
    """
    P1, P2, P3 = world[:, 0], world[:, 1], world[:, 2]
    j1, j2, j3 = rays[:, 0], rays[:, 1], rays[:, 2]
    a2 = np.sum((P2 - P3) ** 2, axis=1)
    b2 = np.sum((P1 - P3) ** 2, axis=1)
    c2 = np.sum((P1 - P2) ** 2, axis=1)
    ca = np.sum(j2 * j3, axis=1)
    cb = np.sum(j1 * j3, axis=1)
    cg = np.sum(j1 * j2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = (a2 - c2) / b2
        p = (a2 + c2) / b2
        A4 = (q - 1) ** 2 - 4 * c2 / b2 * ca**2
        A3 = 4 * (q * (1 - q) * cb - (1 - p) * ca * cg + 2 * c2 / b2 * ca**2 * cb)
        A2 = 2 * (q**2 - 1 + 2 * q**2 * cb**2 + 2 * (b2 - c2) / b2 * ca**2 - 4 * p * ca * cb * cg + 2 * (b2 - a2) / b2 * cg**2)
        A1 = 4 * (-q * (1 + q) * cb + 2 * a2 / b2 * cg**2 * cb - (1 - p) * ca * cg)
        A0 = (1 + q) ** 2 - 4 * a2 / b2 * cg**2
    B = len(world)
    coef = np.stack([A4, A3, A2, A1, A0], axis=1)
    ok_poly = np.all(np.isfinite(coef), axis=1) & (np.abs(A4) > 1e-12 * np.abs(coef).max(axis=1))
    coef = np.where(ok_poly[:, None], coef, np.array([1.0, 0, 0, 0, -1.0]))
    comp = np.zeros((B, 4, 4))
    comp[:, 0, :] = -coef[:, 1:] / coef[:, :1]
    comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
    roots = np.linalg.eigvals(comp)
    real = np.abs(roots.imag) < 1e-6 * (1.0 + np.abs(roots.real))
    v = roots.real
    for _ in range(2):
        f = (((coef[:, 0:1] * v + coef[:, 1:2]) * v + coef[:, 2:3]) * v + coef[:, 3:4]) * v + coef[:, 4:5]
        df = ((4 * coef[:, 0:1] * v + 3 * coef[:, 1:2]) * v + 2 * coef[:, 2:3]) * v + coef[:, 3:4]
        v = np.where(np.abs(df) > 1e-300, v - f / np.where(np.abs(df) > 1e-300, df, 1.0), v)
    with np.errstate(divide="ignore", invalid="ignore"):
        qq, cbb, cgg, caa = q[:, None], cb[:, None], cg[:, None], ca[:, None]
        u = ((-1 + qq) * v**2 - 2 * qq * cbb * v + 1 + qq) / (2 * (cgg - v * caa))
        s1sq = b2[:, None] / (1 + v**2 - 2 * v * cbb)
    valid = ok_poly[:, None] & real & (v > 0) & (u > 0) & (s1sq > 0) & np.isfinite(u) & np.isfinite(s1sq)
    s1 = np.sqrt(np.where(valid, s1sq, 1.0))
    u = np.where(valid, u, 1.0)
    v = np.where(valid, v, 1.0)
    Xc = np.stack([s1[..., None] * j1[:, None], (u * s1)[..., None] * j2[:, None], (v * s1)[..., None] * j3[:, None]], axis=2)
    Wd = np.broadcast_to(world[:, None], Xc.shape)
    R, t = kabsch(Wd, Xc)
    bad = ~valid | ~np.all(np.isfinite(R), axis=(2, 3))
    R[bad] = np.eye(3)
    t[bad] = 0.0
    return R, t, valid & ~bad


def angular_errors(R, t, X, rays):
    """Angle between observed rays and predicted directions; broadcasts over poses."""
    pc = np.matmul(R, X.T) + t[..., :, None]  # (..., 3, n)
    cos = np.sum(pc * rays.T, axis=-2) / np.linalg.norm(pc, axis=-2)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def refine_pose(K: CameraIntrinsics, X, uv, R, t, loss_scale=1.0, max_iterations=20):
    """Robust LM refinement of one pose on pixel reprojection error."""
    n = len(X)

    def fun(x):
        Rx, tx = x
        pc = X @ Rx.T + tx
        q, Jp, _ = project(K, pc, with_jacobians=True)
        bad = ~(pc[:, 2] > 1e-9)
        r = (uv - q)
        r[bad] = 1e3
        J = np.concatenate([Jp @ skew(pc), -Jp], axis=2)
        J[bad] = 0.0
        return r.reshape(-1), J.reshape(2 * n, 6)

    def update(x, dx):
        dR = so3_exp(dx[:3])
        return dR @ x[0], dR @ x[1] + dx[3:]

    prob = Problem(fun, (R, t), update=update, block_of_row=np.repeat(np.arange(n), 2), loss_scale=loss_scale)
    (R, t), report = solve(prob, SolverOptions(max_iterations=max_iterations, function_tolerance=1e-10))
    return R, t, report


def pnp_ransac(K: CameraIntrinsics, X, uv, rng, threshold=0.002, min_inliers=12, n_hypotheses=200, loss_scale=1.0):
    """Pose from 2D-3D matches: P3P hypotheses, MSAC scoring, LM polish.

    Returns ``(R, t, inlier_mask)``; raises RegistrationError when the
    matches cannot support a pose.
    """
    X = np.asarray(X, float)
    uv = np.asarray(uv, float)
    n = len(X)
    if n < 4:
        raise RegistrationError(f"need at least 4 2D-3D correspondences, got {n}")
    rays = unproject(K, uv, strict=False)
    usable = np.flatnonzero(np.all(np.isfinite(rays), axis=1))
    if len(usable) < 4:
        raise RegistrationError(f"need at least 4 usable correspondences, got {len(usable)}")
    rays = np.where(np.isfinite(rays), rays, 0.0)
    idx = usable[np.argsort(rng.random((n_hypotheses, len(usable))), axis=1)[:, :3]]
    R, t, valid = p3p(X[idx], rays[idx])
    err = angular_errors(R, t, X, rays)
    score = np.where(valid[..., None], np.minimum(err, threshold) ** 2, threshold**2).sum(axis=-1)
    b, k = np.unravel_index(int(np.argmin(score)), score.shape)
    if not valid[b, k]:
        raise RegistrationError("no valid P3P hypothesis")
    Rb, tb = R[b, k], t[b, k]
    inl = err[b, k] < threshold
    if inl.sum() < min_inliers:
        raise RegistrationError(f"only {int(inl.sum())} inliers (< {min_inliers})")
    Rb, tb, _ = refine_pose(K, X[inl], uv[inl], Rb, tb, loss_scale=loss_scale)
    inl = angular_errors(Rb, tb, X, rays) < threshold
    if inl.sum() < min_inliers:
        raise RegistrationError(f"only {int(inl.sum())} inliers after refinement (< {min_inliers})")
    return Rb, tb, inl
