"""Two-view relative pose on bearing vectors and multi-view triangulation."""
from __future__ import annotations

import numpy as np

from .camera import CameraIntrinsics, project

W_MAT = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class DegeneratePairError(ValueError):
    """The two views do not have enough parallax to fix a relative pose."""


def essential_from_bearings(f1, f2):
    """Linear (8+ point) essential matrix with f2^T E f1 = 0; batched over leading dims."""
    A = (f2[..., :, :, None] * f1[..., :, None, :]).reshape(f1.shape[:-1] + (9,))
    _, _, Vt = np.linalg.svd(A)
    E = Vt[..., -1, :].reshape(f1.shape[:-2] + (3, 3))
    U, _, Vt = np.linalg.svd(E)
    S = np.zeros(E.shape)
    S[..., 0, 0] = 1.0
    S[..., 1, 1] = 1.0
    return U @ S @ Vt


def sampson_angle(E, f1, f2):
    """First-order angular epipolar error of bearing pairs (rad)."""
    Ef1 = np.einsum("...ij,...nj->...ni", E, f1)
    Etf2 = np.einsum("...ji,...nj->...ni", E, f2)
    num = np.einsum("...ni,...ni->...n", f2, Ef1)
    d1 = np.einsum("...ni,...ni->...n", Ef1, Ef1) - num**2
    d2 = np.einsum("...ni,...ni->...n", Etf2, Etf2) - num**2
    return np.abs(num) / np.sqrt(np.maximum(d1 + d2, 1e-300))


def rotation_only_parallax(f1, f2):
    """Median angle left between rays after the best pure rotation is removed."""
    U, _, Vt = np.linalg.svd(f2.T @ f1)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    c = np.clip(np.einsum("ni,ni->n", f2, f1 @ R.T), -1.0, 1.0)
    return float(np.median(np.arccos(c)))


def triangulate_two(R, t, f1, f2):
    """Midpoint triangulation in the frame of view 1 for X2 = R X1 + t."""
    c2 = -R.T @ t
    d2 = f2 @ R
    return triangulate_midpoint(
        np.concatenate([np.zeros((len(f1), 3)), np.tile(c2, (len(f1), 1))]),
        np.concatenate([f1, d2]),
        np.concatenate([np.arange(len(f1)), np.arange(len(f1))]),
        len(f1),
    )


def decompose_essential(E, f1, f2):
    """Choose the (R, t) of the four candidates with most points in front of both views."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    best = None
    for R in (U @ W_MAT @ Vt, U @ W_MAT.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            X = triangulate_two(R, t, f1, f2)
            X2 = X @ R.T + t
            good = int(np.sum((X[:, 2] > 0) & (X2[:, 2] > 0)))
            if best is None or good > best[0]:
                best = (good, R, t)
    return best[1], best[2]


def relative_pose(f1, f2, rng, threshold=0.002, n_hypotheses=300, min_parallax=np.radians(1.0)):
    """RANSAC relative pose of view 2 w.r.t. view 1 from unit bearings.

    Returns ``(R, t, inlier_mask)`` with unit-norm ``t``.
    """
    n = len(f1)
    if n < 8:
        raise ValueError(f"need at least 8 shared tracks, got {n}")
    parallax = rotation_only_parallax(f1, f2)
    if parallax < min_parallax:
        raise DegeneratePairError(f"median parallax {np.degrees(parallax):.3f} deg below {np.degrees(min_parallax):.3f} deg")
    idx = np.argsort(rng.random((n_hypotheses, n)), axis=1)[:, :8]
    E = essential_from_bearings(f1[idx], f2[idx])
    err = sampson_angle(E, f1[None], f2[None])
    score = np.minimum(err, threshold).sum(axis=1)
    inl = err[int(np.argmin(score))] < threshold
    for _ in range(2):
        E = essential_from_bearings(f1[inl], f2[inl])
        inl = sampson_angle(E, f1, f2) < threshold
    R, t = decompose_essential(E, f1[inl], f2[inl])
    return R, t / np.linalg.norm(t), inl


def triangulate_midpoint(centers, dirs, group, n_groups):
    """Least-squares point closest to all rays of each group."""
    P = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    A = np.zeros((n_groups, 3, 3))
    b = np.zeros((n_groups, 3))
    np.add.at(A, group, P)
    np.add.at(b, group, np.einsum("nij,nj->ni", P, centers))
    A[:, np.arange(3), np.arange(3)] += 1e-12
    return np.linalg.solve(A, b[..., None])[..., 0]


def refine_points(K: CameraIntrinsics, X, group, R, t, uv, iterations=10):
    """Per-point damped Gauss-Newton on pixel reprojection error.

    ``group[i]`` names the point of observation ``i`` seen with pose
    ``R[i], t[i]``. Returns refined points and per-observation residuals.
    """
    X = np.array(X, dtype=float)
    G = len(X)
    lam = np.full(G, 1e-6)

    def evaluate(Xg):
        pc = np.einsum("nij,nj->ni", R, Xg[group]) + t
        ok = pc[:, 2] > 1e-9
        pcs = np.where(ok[:, None], pc, np.array([0.0, 0.0, 1.0]))
        q, Jp, _ = project(K, pcs, with_jacobians=True)
        res = uv - q
        res[~ok] = 1e3
        cost = np.bincount(group, weights=(res**2).sum(1), minlength=G)
        return res, Jp, ok, cost

    res, Jp, ok, cost = evaluate(X)
    for _ in range(iterations):
        J = -np.einsum("nij,njk->nik", Jp, R) * ok[:, None, None]
        H = np.zeros((G, 3, 3))
        g = np.zeros((G, 3))
        np.add.at(H, group, np.einsum("nji,njk->nik", J, J))
        np.add.at(g, group, np.einsum("nji,nj->ni", J, res))
        H[:, np.arange(3), np.arange(3)] *= 1.0 + lam[:, None]
        H[:, np.arange(3), np.arange(3)] += 1e-12
        dX = -np.linalg.solve(H, g[..., None])[..., 0]
        Xn = X + dX
        res_n, Jp_n, ok_n, cost_n = evaluate(Xn)
        better = cost_n < cost
        X[better] = Xn[better]
        lam = np.where(better, lam * 0.1, lam * 10.0)
        sel = better[group]
        res[sel], Jp[sel], ok[sel] = res_n[sel], Jp_n[sel], ok_n[sel]
        cost = np.where(better, cost_n, cost)
    return X, res
