"""Straight-pipe detection as general cones in a (possibly drifting) point cloud.

A cone is the quadric ``X^T C X = 0`` with

    C = [[R^T D R, R^T D t], [t^T D R, t^T D t]],  D = diag(-c^2, -c^2, 1),

so in the cone frame ``X' = R X + t`` the surface is ``rho = |z'| / c``. The
taper ``1 / c`` goes to zero for an undistorted pipe; below ``C_MIN`` the
shape is represented as a :class:`Cylinder` instead.

Refinement works in an equivalent linear-radius form ``rho = a + tau z'``
(origin on the axis near the data, ``tau = +-1/c``), which stays well
conditioned as ``tau -> 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.spatial import cKDTree

from .geometry import look_rotation, skew, so3_exp
from .lm import Problem, SolverOptions, solve
from .model import PipeInstance

C_MIN = 1e-4
_FLIP = np.diag([1.0, -1.0, -1.0])

_LOWER = [(i, j) for j in range(4) for i in range(j, 4)]
_LI = np.array([p[0] for p in _LOWER])
_LJ = np.array([p[1] for p in _LOWER])
_DUP = np.where(_LI == _LJ, 1.0, 2.0)


class NotACone(ValueError):
    pass


class DegenerateCylinder(ValueError):
    """The quadric is (numerically) a cylinder; carries the axis estimate."""

    def __init__(self, message, R=None, t=None, radius=None):
        super().__init__(message)
        self.R, self.t, self.radius = R, t, radius


class DegenerateConfiguration(ValueError):
    pass


def vech(S):
    """Lower-triangular half vectorization (column-major) of symmetric 4x4 matrices."""
    S = np.asarray(S, dtype=float)
    return S[..., _LI, _LJ]


def unvech(v):
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (4, 4))
    S[..., _LI, _LJ] = v
    S[..., _LJ, _LI] = v
    return S


def design_rows(X):
    """Rows with ``design_rows(X) @ vech(C) == X_h^T C X_h`` (off-diagonals doubled)."""
    X = np.asarray(X, dtype=float)
    Xh = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
    return Xh[..., _LI] * Xh[..., _LJ] * _DUP


def normalize_quadric(C):
    """Unit Frobenius norm, sign fixed so that C[3, 3] >= 0 when nonzero."""
    C = np.asarray(C, dtype=float)
    C = C / np.linalg.norm(C, axis=(-2, -1), keepdims=True)
    s = np.where(C[..., 3, 3] < 0, -1.0, 1.0)
    return C * s[..., None, None]


def compose_cone(c, R, t):
    D = np.array([-c * c, -c * c, 1.0])
    RtD = R.T * D
    C = np.empty((4, 4))
    C[:3, :3] = RtD @ R
    C[:3, 3] = C[3, :3] = RtD @ t
    C[3, 3] = t @ (D * t)
    return C


def _hartley(X):
    mu = X.mean(axis=-2, keepdims=True)
    scale = np.sqrt(3.0) / np.maximum(np.sqrt(((X - mu) ** 2).sum(-1)).mean(-1), 1e-300)
    return mu[..., 0, :], scale


def _denormalize(Cn, mu, scale):
    """C for raw points from C fitted to ``scale * (X - mu)``."""
    T = np.zeros(mu.shape[:-1] + (4, 4))
    T[..., [0, 1, 2], [0, 1, 2]] = scale[..., None]
    T[..., :3, 3] = -scale[..., None] * mu
    T[..., 3, 3] = 1.0
    return np.swapaxes(T, -1, -2) @ Cn @ T


def cone_from_nine_points(X):
    """Quadric through nine points (right null vector of the 9x10 design matrix)."""
    X = np.asarray(X, dtype=float)
    if X.shape != (9, 3):
        raise ValueError(f"expected 9 points, got array of shape {X.shape}")
    mu, scale = _hartley(X)
    A = design_rows(scale * (X - mu))
    _, s, Vt = np.linalg.svd(A)
    cond = s[8] / s[0]
    if cond < 1e-10:
        raise DegenerateConfiguration(f"nine-point design matrix is rank deficient (s9/s1 = {cond:.2e})")
    C = _denormalize(unvech(Vt[-1]), mu, scale)
    return normalize_quadric(C)


def _frame_from_eigvecs(V):
    """Rows (e1, e2, e3) with e3 = last eigenvector, det +1."""
    R = np.swapaxes(V, -1, -2).copy()
    d = np.linalg.det(R)
    R[..., 1, :] *= np.sign(d)[..., None]
    return R


@dataclass(frozen=True)
class Cone:
    c: float
    R: np.ndarray
    t: np.ndarray

    kind = "cone"

    @property
    def taper(self):
        return 1.0 / self.c

    @property
    def direction(self):
        return self.R[2].copy()

    @property
    def apex(self):
        return -self.R.T @ self.t

    def matrix(self):
        return normalize_quadric(compose_cone(self.c, self.R, self.t))

    def local(self, X):
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def axis_distance(self, X):
        Y = self.local(X)
        return np.hypot(Y[..., 0], Y[..., 1])

    def local_radius(self, X):
        return np.abs(self.local(X)[..., 2]) / self.c

    def distance(self, X):
        return cone_distance(self, X)

    def scaled(self, s):
        return Cone(self.c, self.R, self.t * s)

    def transformed(self, Rw, tw):
        """The same cone after mapping the world by X -> Rw X + tw."""
        R = self.R @ Rw.T
        return Cone(self.c, R, self.t - R @ tw)

    def with_axis(self, R, t):
        return Cone(self.c, R, t)

    def to_json(self):
        return {"kind": "cone", "c": self.c, "R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}


@dataclass(frozen=True)
class Cylinder:
    """Cylinder of the given radius about the z-axis of ``X' = R X + t``."""

    R: np.ndarray
    t: np.ndarray
    radius: float

    kind = "cylinder"
    c = np.inf
    taper = 0.0

    @property
    def direction(self):
        return self.R[2].copy()

    def local(self, X):
        return np.asarray(X, dtype=float) @ self.R.T + self.t

    def axis_distance(self, X):
        Y = self.local(X)
        return np.hypot(Y[..., 0], Y[..., 1])

    def local_radius(self, X):
        return np.full(np.shape(X)[:-1], self.radius)

    def distance(self, X):
        return np.abs(self.axis_distance(X) - self.radius)

    def matrix(self):
        D = np.array([-1.0, -1.0, 0.0])
        C = np.empty((4, 4))
        RtD = self.R.T * D
        C[:3, :3] = RtD @ self.R
        C[:3, 3] = C[3, :3] = RtD @ self.t
        C[3, 3] = self.t @ (D * self.t) + self.radius**2
        return normalize_quadric(C)

    def scaled(self, s):
        return Cylinder(self.R, self.t * s, self.radius * s)

    def transformed(self, Rw, tw):
        R = self.R @ Rw.T
        return Cylinder(R, self.t - R @ tw, self.radius)

    def with_axis(self, R, t):
        return Cylinder(R, t, self.radius)

    def to_json(self):
        return {"kind": "cylinder", "c": None, "R": self.R.reshape(-1).tolist(), "t": self.t.tolist(), "radius_fit": self.radius}


def shape_from_json(d):
    R = np.array(d["R"], dtype=float).reshape(3, 3)
    t = np.array(d["t"], dtype=float)
    if d.get("kind") == "cylinder":
        return Cylinder(R, t, float(d["radius_fit"]))
    return Cone(float(d["c"]), R, t)


def decompose_cone(C, direction=None, c_min=C_MIN, tol=1e-6):
    """Split a cone quadric into (c, R, t).

    ``direction`` (optional) picks the sign of the recovered axis. Raises
    NotACone for the wrong eigenvalue signature or when ``C[3, 3]`` disagrees
    with the recovered apex by more than ``tol`` (relative); ``tol=None``
    skips that check, which projects a noisy quadric onto the nearest cone
    with the same axis block. Raises DegenerateCylinder when the taper
    ``1/c`` is below ``c_min``.
    """
    C = np.asarray(C, dtype=float)
    if not np.allclose(C, C.T, atol=1e-12 * max(1.0, np.abs(C).max())):
        raise NotACone("quadric matrix is not symmetric")
    C = C / np.linalg.norm(C)
    A, m = C[:3, :3], C[:3, 3]
    lam, V = np.linalg.eigh(A)
    npos = int((lam > 0).sum())
    if npos >= 2:
        C, A, m = -C, -A, -m
        lam, V = -lam[::-1], V[:, ::-1]
        npos = 3 - npos
    scale = np.abs(lam).max()
    if npos == 0:
        k = np.argmin(np.abs(lam))
        if abs(lam[k]) <= c_min**2 * scale:
            R, t, r = _cylinder_from_quadric(C, lam, V, k)
            raise DegenerateCylinder("quadric is a cylinder (taper below c_min)", R, t, r)
        raise NotACone(f"eigenvalue signature (-,-,-) of the 3x3 block: {lam}")
    # lam[0] <= lam[1] < 0 < lam[2]
    k = lam[2]
    c2 = -0.5 * (lam[0] + lam[1]) / k
    c = float(np.sqrt(c2))
    if 1.0 / c < c_min:
        R, t, r = _cylinder_from_quadric(C, lam, V, 2)
        raise DegenerateCylinder(f"taper 1/c = {1.0 / c:.2e} below c_min", R, t, r)
    R = _frame_from_eigvecs(V)
    if direction is not None and R[2] @ np.asarray(direction) < 0:
        R = _FLIP @ R
    D = np.array([-c2, -c2, 1.0])
    t = (R @ m) / (k * D)
    resid = abs(C[3, 3] / k - t @ (D * t))
    if tol is not None and resid > tol * max(1.0, t @ (np.abs(D) * t)):
        raise NotACone(f"offset block inconsistent with C[3,3] (mismatch {resid:.2e})")
    return c, R, t


def _cylinder_from_quadric(C, lam, V, k):
    """Axis frame and radius of a cylinder-like quadric; ``k`` is the axis eigen index."""
    idx = [i for i in range(3) if i != k]
    R = np.stack([V[:, idx[0]], V[:, idx[1]], V[:, k]])
    if np.linalg.det(R) < 0:
        R[1] = -R[1]
    kk = -0.5 * (lam[idx[0]] + lam[idx[1]])
    m = C[:3, 3]
    # centre p = -A^+ m restricted to the radial plane
    p = sum(-(V[:, i] @ m) / lam[i] * V[:, i] for i in idx)
    r2 = (C[3, 3] + (p @ C[:3, :3] @ p) + 2 * m @ p) / kk
    t = -R @ p
    return R, t, float(np.sqrt(max(r2, 0.0)))


def shape_from_quadric(C, direction=None, c_min=C_MIN, tol=1e-6):
    """Cone, or Cylinder when the quadric is degenerate; NotACone otherwise."""
    try:
        c, R, t = decompose_cone(C, direction, c_min, tol)
        return Cone(c, R, t)
    except DegenerateCylinder as e:
        R = e.R
        if direction is not None and R[2] @ np.asarray(direction) < 0:
            R = _FLIP @ R
            return Cylinder(R, _FLIP @ e.t, e.radius)
        return Cylinder(R, e.t, e.radius)


def cone_distance(cone: Cone, X):
    """Distance from points to the cone surface, measured in the (rho, |z'|) half-plane."""
    Y = cone.local(X)
    rho = np.hypot(Y[..., 0], Y[..., 1])
    c = cone.c
    return np.abs(c * rho - np.abs(Y[..., 2])) / np.sqrt(1.0 + c * c)


# --------------------------------------------------------------------------
# linear-radius form used by RANSAC scoring and refinement


def _to_linear(shape, X):
    """(R, t, a, tau) with rho_surface = a + tau z', origin at the data's axial median."""
    R, t = shape.R, shape.t
    z = (np.asarray(X) @ R.T + t)[:, 2]
    if isinstance(shape, Cylinder):
        t = t - np.median(z) * np.eye(3)[2]
        return R, t, shape.radius, 0.0
    zs = float(np.median(z))
    s = 1.0 if zs >= 0 else -1.0
    tau = 1.0 / shape.c
    return R, t - zs * np.eye(3)[2], tau * abs(zs), s * tau


def _from_linear(R, t, a, tau, c_min=C_MIN):
    if abs(tau) < c_min:
        return Cylinder(R, t, float(a))
    # apex where a + tau z' = 0
    t_apex = t + (a / tau) * np.eye(3)[2]
    return Cone(1.0 / abs(tau), R, t_apex)


def linear_residual(R, t, a, tau, X, with_jacobian=False):
    """Signed distance to the surface rho = a + tau z' (and d/d[wx, wy, dx, dy, a, tau])."""
    Y = X @ R.T + t
    rho = np.hypot(Y[:, 0], Y[:, 1])
    n = np.sqrt(1.0 + tau * tau)
    r = (rho - a - tau * Y[:, 2]) / n
    if not with_jacobian:
        return r
    safe = np.maximum(rho, 1e-9)
    drdY = np.stack([Y[:, 0] / safe, Y[:, 1] / safe, np.full(len(Y), -tau)], axis=1) / n
    drdY[rho <= 1e-9, :2] = 0.0
    dYdw = -skew(Y)[:, :, :2]
    J = np.empty((len(X), 6))
    J[:, 0:2] = np.einsum("ni,nij->nj", drdY, dYdw)
    J[:, 2:4] = drdY[:, :2]
    J[:, 4] = -1.0 / n
    J[:, 5] = -Y[:, 2] / n - r * tau / (n * n)
    return r, J


def _refine_linear(R, t, a, tau, X, loss_scale, fit_taper=True, max_iterations=30):
    cols = slice(0, 6 if fit_taper else 5)

    def fun(x):
        r, J = linear_residual(*x, X, with_jacobian=True)
        return r, J[:, cols]

    def update(x, dx):
        Rx, tx, ax, taux = x
        dR = so3_exp(np.array([dx[0], dx[1], 0.0]))
        tn = dR @ tx + np.array([dx[2], dx[3], 0.0])
        return dR @ Rx, tn, ax + dx[4], taux + (dx[5] if fit_taper else 0.0)

    prob = Problem(fun, (R, t, float(a), float(tau)), update=update, loss_scale=loss_scale)
    return solve(prob, SolverOptions(max_iterations=max_iterations, function_tolerance=1e-10))


def relative_distance(shape, X):
    """Surface distance over local radius; scale free, so usable before scale is known."""
    Y = shape.local(X)
    rho = np.hypot(Y[..., 0], Y[..., 1])
    if isinstance(shape, Cylinder):
        return np.abs(rho - shape.radius) / shape.radius
    local = np.abs(Y[..., 2]) / shape.c
    d = np.abs(shape.c * rho - np.abs(Y[..., 2])) / np.sqrt(1.0 + shape.c**2)
    return d / np.maximum(local, 1e-300)


def refine_cone(shape0, X, threshold=0.08, loss_rel=0.05, c_min=C_MIN, fit_taper=True):
    """Locally optimized refit of a cone (or cylinder) to its inliers.

    Robust LM on the geometric surface distance, then one inlier
    re-estimation and refit. Returns ``(shape, inlier_mask, report)`` where
    ``report`` is the first solve report; a Cylinder is returned when the
    taper collapses below ``c_min``.
    """
    X = np.asarray(X, dtype=float)
    if len(X) < 9:
        raise ValueError(f"refine_cone needs at least 9 inliers, got {len(X)}")
    R, t, a, tau = _to_linear(shape0, X)
    if not fit_taper:
        tau = 0.0
    scale = loss_rel * abs(a) if a else None
    (R, t, a, tau), first = _refine_linear(R, t, a, tau, X, scale, fit_taper)
    shape = _from_linear(R, t, a, tau, c_min)
    inl = relative_distance(shape, X) < threshold
    if inl.sum() >= 9 and not inl.all():
        (R, t, a, tau), _ = _refine_linear(R, t, a, tau, X[inl], loss_rel * abs(a), fit_taper)
        shape = _from_linear(R, t, a, tau, c_min)
        inl = relative_distance(shape, X) < threshold
    return shape, inl, first


def fit_cylinder(X, shape0=None, loss_rel=0.05):
    """Axis and radius of the best cylinder through X (robust LM, PCA start)."""
    X = np.asarray(X, dtype=float)
    if shape0 is None:
        mu = X.mean(0)
        _, _, Vt = np.linalg.svd(X - mu)
        R = look_rotation(Vt[0])
        t = -R @ mu
        Y = X @ R.T + t
        shape0 = Cylinder(R, t, float(np.mean(np.hypot(Y[:, 0], Y[:, 1]))))
    R, t, a, _ = _to_linear(shape0, X)
    (R, t, a, _), _ = _refine_linear(R, t, a, 0.0, X, loss_rel * abs(a), fit_taper=False)
    return Cylinder(R, t, float(a))


# --------------------------------------------------------------------------
# RANSAC


@dataclass
class DetectionConfig:
    threshold: float = 0.08  # relative to the local radius
    min_inliers: int = 200
    min_ratio: float = 0.4
    max_iterations: int = 2000
    confidence: float = 0.99
    label_ratio: float = 0.5
    label_min: int = 20
    loss_rel: float = 0.05
    gap: float = 1.0  # max axial gap inside one instance, in local radii
    coverage: float = 0.5  # min fraction of angular sectors hit per axial slice
    c_min: float = C_MIN
    batch: int = 250
    sample_radius: float = 4.0  # neighbourhood for minimal samples, in radii
    max_taper: float = 0.01  # steeper hypotheses would bridge wider fittings
    radius_tolerance: float = 0.15  # vs the expected radius, once it is known
    min_length: float = 5.0  # axial extent of a new instance, in radii
    refine_rounds: int = 3
    lo_candidates: int = 5  # best hypotheses given local optimization


def _hypotheses(X, idx, c_min):
    """Batched nine-point quadrics -> (R, t, a, tau, ok) in linear-radius form."""
    P = X[idx]
    mu, scale = _hartley(P)
    A = design_rows(scale[:, None, None] * (P - mu[:, None, :]))
    _, s, Vt = np.linalg.svd(A)
    ok = s[:, 8] > 1e-10 * s[:, 0]
    C = _denormalize(unvech(Vt[:, -1]), mu, scale)
    C /= np.linalg.norm(C, axis=(1, 2), keepdims=True)
    Aq, m = C[:, :3, :3], C[:, :3, 3]
    lam, V = np.linalg.eigh(Aq)
    npos = (lam > 0).sum(1)
    flip = npos >= 2
    sgn = np.where(flip, -1.0, 1.0)
    lam = np.where(flip[:, None], -lam[:, ::-1], lam)
    V = np.where(flip[:, None, None], V[:, :, ::-1], V)
    m = m * sgn[:, None]
    c33 = C[:, 3, 3] * sgn
    H = len(idx)
    scl = np.abs(lam).max(1)
    cone_like = (npos == 1) | (npos == 2)
    # for the all-negative case the axis is the smallest-magnitude eigenvalue (index 2)
    near_cyl = ~cone_like & (np.abs(lam[:, 2]) <= c_min**2 * scl)
    pair = -0.5 * (lam[:, 0] + lam[:, 1])
    # circular cross-section: the two radial eigenvalues must agree
    ok &= np.abs(lam[:, 0] - lam[:, 1]) < 0.5 * pair
    ok &= cone_like | near_cyl
    R = np.swapaxes(V, 1, 2).copy()
    R[:, 1] *= np.sign(np.linalg.det(R))[:, None]
    taper2 = np.where(cone_like, lam[:, 2] / np.maximum(pair, 1e-300), 0.0)
    cyl = near_cyl | (taper2 < c_min**2)
    tau = np.sqrt(np.maximum(taper2, 0.0))
    # cone: t = R m / (k D); D = (-c^2, -c^2, 1) with k = lam_axis
    Rm = np.einsum("hij,hj->hi", R, m)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cone = np.stack([-Rm[:, 0] / pair, -Rm[:, 1] / pair, Rm[:, 2] / lam[:, 2]], axis=1)
        # cylinder: origin on the axis; radius from the constant term
        t_cyl = np.stack([-Rm[:, 0] / pair, -Rm[:, 1] / pair, np.zeros(H)], axis=1)
        r2 = c33 / pair + t_cyl[:, 0] ** 2 + t_cyl[:, 1] ** 2
    # cylinder test: x'^2 + y'^2 = r^2 with the origin shifted by t_cyl
    t = np.where(cyl[:, None], t_cyl, t_cone)
    a = np.where(cyl, np.sqrt(np.maximum(r2, 0.0)), 0.0)
    tau = np.where(cyl, 0.0, tau)
    ok &= np.where(cyl, r2 > 0, tau > 0)
    ok &= np.all(np.isfinite(t), axis=1) & np.isfinite(a)
    return R, t, a, tau, ok


def _score(R, t, a, tau, X):
    """Absolute surface distances (H, N) and the local radius at the data centroid (H,)."""
    Y = np.einsum("hij,nj->hni", R, X) + t[:, None, :]
    rho = np.hypot(Y[..., 0], Y[..., 1])
    local = a[:, None] + tau[:, None] * np.abs(Y[..., 2])
    d = np.abs(rho - local) / np.sqrt(1.0 + tau[:, None] ** 2)
    return d, a + tau * np.abs(t[:, 2])


def path_radius(X, centers):
    """Median distance of points to the camera-centre polyline.

    The camera travels inside the tube, so this estimates the pipe radius in
    model units before the scale is known.
    """
    X = np.asarray(X, dtype=float)
    C = np.asarray(centers, dtype=float)
    if len(C) == 1:
        return float(np.median(np.linalg.norm(X - C[0], axis=1)))
    A, B = C[:-1], C[1:]
    AB = B - A
    L2 = np.maximum((AB**2).sum(1), 1e-300)
    best = np.full(len(X), np.inf)
    for lo in range(0, len(X), 2048):
        P = X[lo:lo + 2048, None, :]
        s = np.clip(((P - A) * AB).sum(-1) / L2, 0.0, 1.0)
        d = np.linalg.norm(P - (A + s[..., None] * AB), axis=-1)
        best[lo:lo + 2048] = d.min(1)
    return float(np.median(best))


def _largest_axial_run(z, gap):
    """Mask of the largest group of sorted axial positions with no gap above ``gap``."""
    if len(z) == 0:
        return np.zeros(0, dtype=bool)
    order = np.argsort(z)
    zs = z[order]
    breaks = np.flatnonzero(np.diff(zs) > gap) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [len(z)]])
    k = int(np.argmax(ends - starts))
    mask = np.zeros(len(z), dtype=bool)
    mask[order[starts[k]:ends[k]]] = True
    return mask


def contiguous_inliers(shape, X, inliers, gap_rel, min_coverage=0.0, sectors=8):
    """Restrict an inlier mask to its largest axially contiguous run.

    Axial slices one gap long whose inliers occupy fewer than
    ``min_coverage`` of ``sectors`` angular sectors count as empty: a
    tilted fit grazing a wider bore collects one-sided support only.
    """
    idx = np.flatnonzero(inliers)
    if len(idx) == 0:
        return inliers
    Y = shape.local(X[idx])
    z = Y[:, 2]
    gap = gap_rel * float(np.median(shape.local_radius(X[idx])))
    if min_coverage > 0:
        b = np.floor((z - z.min()) / gap).astype(np.int64)
        sec = ((np.arctan2(Y[:, 1], Y[:, 0]) + np.pi) / (2 * np.pi) * sectors).astype(np.int64) % sectors
        occupied = np.zeros((b.max() + 1, sectors), dtype=bool)
        occupied[b, sec] = True
        good = occupied.mean(1) >= min_coverage
        idx, z = idx[good[b]], z[good[b]]
        if len(idx) == 0:
            return np.zeros_like(inliers)
    keep = _largest_axial_run(z, gap)
    out = np.zeros_like(inliers)
    out[idx[keep]] = True
    return out


def ransac_cone(X, rng, config: DetectionConfig | None = None, scale=None, keep=1):
    """Best cone/cylinder hypothesis for X by MSAC over nine-point quadrics.

    ``scale`` is the expected pipe radius in the units of X (default: the
    median distance to the principal axis). Points within
    ``threshold * scale`` of a hypothesis are inliers, and hypotheses whose
    radius at the data centroid is off by more than a factor 2 are skipped.
    Returns ``(shape, inlier_mask, n_hypotheses)``; ``shape`` is None when
    no valid hypothesis was found. With ``keep > 1`` the first two entries
    are lists holding the ``keep`` cheapest hypotheses, best first.
    """
    cfg = config or DetectionConfig()
    X = np.asarray(X, dtype=float)
    N = len(X)
    if N < 9:
        raise ValueError(f"cone RANSAC needs at least 9 points, got {N}")
    mu = X.mean(0)
    Xc = X - mu
    if scale is None:
        _, _, Vt = np.linalg.svd(Xc, full_matrices=False)
        scale = float(np.median(np.linalg.norm(Xc - np.outer(Xc @ Vt[0], Vt[0]), axis=1)))
    thr = cfg.threshold * scale
    tree = cKDTree(Xc)
    top = []  # (cost, R, t, a, tau, n_inliers)
    done = 0
    needed = cfg.max_iterations
    while done < min(needed, cfg.max_iterations):
        H = min(cfg.batch, cfg.max_iterations - done)
        idx = _local_samples(tree, Xc, rng, H, cfg.sample_radius * scale)
        R, t, a, tau, ok = _hypotheses(Xc, idx, cfg.c_min)
        done += H
        if not ok.any():
            continue
        R, t, a, tau = R[ok], t[ok], a[ok], tau[ok]
        # minimal quadrics overestimate taper far more than they miss the axis:
        # steep ones become the cylinder through their radius at the centroid
        steep = tau > cfg.max_taper
        a = np.where(steep, a + tau * np.abs(t[:, 2]), a)
        tau = np.where(steep, 0.0, tau)
        d, local0 = _score(R, t, a, tau, Xc)
        cost = (np.minimum(d, thr) ** 2).sum(1)
        cost[~((local0 > 0.5 * scale) & (local0 < 2.0 * scale))] = np.inf
        best_before = top[0][0] if top else np.inf
        for k in np.argsort(cost, kind="stable")[:keep]:
            if np.isfinite(cost[k]):
                top.append((float(cost[k]), R[k], t[k] - R[k] @ mu, a[k], tau[k], int((d[k] < thr).sum())))
        top = sorted(top, key=lambda h: h[0])[:keep]
        if top and top[0][0] < best_before:
            w = top[0][5] / N
            if w >= 1.0:
                needed = 0
            elif w**9 > 1e-12:
                needed = int(np.ceil(np.log(1 - cfg.confidence) / np.log1p(-(w**9))))
    shapes = [_from_linear(R, t, a, tau, cfg.c_min) for _, R, t, a, tau, _ in top]
    masks = [sh.distance(X) < thr for sh in shapes]
    if keep > 1:
        return shapes, masks, done
    if not shapes:
        return None, np.zeros(N, dtype=bool), done
    return shapes[0], masks[0], done


def _local_samples(tree, X, rng, H, radius):
    """Nine indices per hypothesis: a random seed plus eight from its neighbourhood."""
    N = len(X)
    seeds = rng.integers(0, N, size=H)
    out = np.empty((H, 9), dtype=np.int64)
    for h, nb in enumerate(tree.query_ball_point(X[seeds], radius)):
        nb = np.asarray(nb, dtype=np.int64)
        nb = nb[nb != seeds[h]]
        if len(nb) < 8:
            nb = np.delete(np.arange(N), seeds[h])
        pick = rng.choice(len(nb), 8, replace=False)
        out[h, 0] = seeds[h]
        out[h, 1:] = nb[pick]
    return out


def fit_instance(X, rng, config: DetectionConfig | None = None, scale=None, direction=None):
    """RANSAC, axial contiguity, refinement. Returns (shape, mask) or (None, empty mask)."""
    cfg = config or DetectionConfig()
    shapes, masks, _ = ransac_cone(X, rng, cfg, scale, keep=cfg.lo_candidates)
    best = (-1, np.inf, None, None)
    for shape, inl in zip(shapes, masks):
        inl = contiguous_inliers(shape, X, inl, cfg.gap, cfg.coverage)
        if inl.sum() < 9:
            continue
        shape, full = _local_optimize(shape, inl, X, cfg)
        cost = float(np.sum(np.minimum(relative_distance(shape, X), cfg.threshold) ** 2))
        if (full.sum(), -cost) > (best[0], -best[1]):
            best = (int(full.sum()), cost, shape, full)
    if best[2] is None:
        return None, np.zeros(len(X), dtype=bool)
    shape, full = best[2], best[3]
    if direction is not None:
        shape = orient(shape, direction)
    return shape, full


def _local_optimize(shape, full, X, cfg):
    """Refit and re-collect inliers while the contiguous inlier set grows."""
    for k in range(cfg.refine_rounds):
        refined, _, _ = refine_cone(shape, X[full], cfg.threshold, cfg.loss_rel, cfg.c_min)
        if refined.taper > cfg.max_taper:
            refined, _, _ = refine_cone(shape, X[full], cfg.threshold, cfg.loss_rel, cfg.c_min, fit_taper=False)
        grown = contiguous_inliers(refined, X, relative_distance(refined, X) < cfg.threshold, cfg.gap, cfg.coverage)
        if k > 0 and grown.sum() <= full.sum():
            break
        shape, full = refined, grown
    return shape, full


def orient(shape, direction):
    """Flip the axis so that it points along ``direction``."""
    if shape.R[2] @ np.asarray(direction) >= 0:
        return shape
    return shape.with_axis(_FLIP @ shape.R, _FLIP @ shape.t)


# --------------------------------------------------------------------------
# detection inside the incremental model


def _frame_labels(model, frames, inlier_ids, candidate_ids, cfg):
    """Frames whose observed candidates are mostly inliers of the instance."""
    inl = np.zeros(len(model.has_point), dtype=bool)
    inl[inlier_ids] = True
    cand = np.zeros(len(model.has_point), dtype=bool)
    cand[candidate_ids] = True
    labelled = []
    for f in frames:
        o = model.frame_obs(f)
        o = o[model.obs_valid[o]]
        pts = model.obs_track[o]
        pts = pts[cand[pts]]
        if len(pts) == 0:
            continue
        n_in = int(inl[pts].sum())
        if n_in >= cfg.label_min and n_in >= cfg.label_ratio * len(pts):
            labelled.append(int(f))
    return labelled


def _attached(z_old, z_new, gap):
    """Mask of new axial positions chained to the old ones by steps of at most ``gap``."""
    z = np.concatenate([z_old, z_new])
    order = np.argsort(z)
    run = np.concatenate([[0], np.cumsum(np.diff(z[order]) > gap)])
    label = np.empty(len(z), dtype=np.int64)
    label[order] = run
    return np.isin(label[len(z_old):], np.unique(label[: len(z_old)]))


def extend_pipes(model, frames, cfg: DetectionConfig):
    """Grow active instances with nearby unassigned points; retire stale ones.

    An instance whose pipe is no longer labelled by any of ``frames`` is
    deactivated. Returns the indices of instances that gained points.
    """
    grown = []
    seen = np.zeros(len(model.has_point), dtype=bool)
    seen[model.points_seen_by(frames)] = True
    for i, pipe in enumerate(model.pipes):
        if not pipe.active:
            continue
        cand = np.flatnonzero(seen & model.has_point & (model.point_pipe < 0))
        if len(cand) and len(pipe.inliers):
            near = cand[relative_distance(pipe.shape, model.X[cand]) < cfg.threshold]
            z_old = pipe.shape.local(model.X[pipe.inliers])[:, 2]
            z_new = pipe.shape.local(model.X[near])[:, 2]
            gap = cfg.gap * float(np.median(pipe.shape.local_radius(model.X[pipe.inliers])))
            new = near[_attached(z_old, z_new, gap)]
            if len(new):
                pipe.inliers = np.union1d(pipe.inliers, new)
                model.point_pipe[new] = i
                grown.append(i)
        pool = np.flatnonzero(seen & model.has_point & ((model.point_pipe < 0) | (model.point_pipe == i)))
        lab = _frame_labels(model, frames, pipe.inliers, pool, cfg)
        pipe.frames = sorted(set(pipe.frames) | set(lab))
        for f in lab:
            model.frame_labels[f].add(i)
        if not lab:
            pipe.active = False
    return grown


def detect_pipes(model, frames, rng, config: DetectionConfig | None = None, direction=None, radius=None,
                 expected_radius=None):
    """Search new straight-pipe instances among points seen by ``frames``.

    Candidates are reconstructed points not assigned to any instance.
    Accepted instances are refined, their frames labelled and their inliers
    assigned; the new :class:`PipeInstance` objects are appended to
    ``model.pipes`` and returned.

    ``expected_radius`` (model units) rejects instances whose mean inlier
    radius is off by more than ``radius_tolerance``, e.g. the wider bore of
    a tee. Without it, the first accepted instance sets the reference.
    """
    cfg = config or DetectionConfig()
    seen = model.points_seen_by(frames)
    cand = seen[model.has_point[seen] & (model.point_pipe[seen] < 0)]
    if len(cand) < 9:
        raise ValueError(f"pipe detection needs at least 9 candidate points, got {len(cand)}")
    centers = model.camera_centers(np.sort(np.asarray(frames)))
    if direction is None and len(centers) > 1:
        direction = centers[-1] - centers[0]
    ref = expected_radius
    found = []
    while len(cand) >= max(cfg.min_inliers, 9):
        X = model.X[cand]
        shape, inl = fit_instance(X, rng, cfg, path_radius(X, centers), direction)
        if shape is None:
            break
        n_in = int(inl.sum())
        if n_in < cfg.min_inliers or n_in < cfg.min_ratio * len(cand):
            break
        ids = cand[inl]
        mean_r = float(np.mean(shape.axis_distance(model.X[ids])))
        if ref is not None and abs(mean_r / ref - 1.0) > cfg.radius_tolerance:
            cand = cand[~inl]  # not this pipe's bore; keep searching the rest
            continue
        z = shape.local(model.X[ids])[:, 2]
        if np.ptp(z) < cfg.min_length * mean_r:
            break  # too short to pin the axis; wait for more of the pipe
        lab = _frame_labels(model, frames, ids, cand, cfg)
        if not lab:
            break
        k = len(model.pipes)
        pipe = PipeInstance(shape=shape, inliers=np.sort(ids), frames=lab, radius=model.radius if radius is None else radius)
        model.pipes.append(pipe)
        model.point_pipe[ids] = k
        for f in lab:
            model.frame_labels[f].add(k)
        found.append(pipe)
        ref = mean_r if ref is None else ref
        cand = cand[~inl]
    return found


def sequential_ransac(X, n_instances, rng, config: DetectionConfig | None = None, centers=None):
    """Extract up to ``n_instances`` shapes, removing inliers between rounds.

    ``centers`` (camera path, optional) provides the radius scale for the
    inlier threshold. Returns a list of ``(shape, index_array)``; may be
    shorter than requested.
    """
    cfg = config or DetectionConfig()
    X = np.asarray(X, dtype=float)
    remaining = np.arange(len(X))
    out = []
    for _ in range(n_instances):
        if len(remaining) < max(9, cfg.min_inliers):
            break
        scale = None if centers is None else path_radius(X[remaining], centers)
        shape, inl = fit_instance(X[remaining], rng, cfg, scale)
        if shape is None or inl.sum() < cfg.min_inliers:
            break
        out.append((shape, remaining[inl]))
        remaining = remaining[~inl]
    return out
