"""Wide-angle fisheye camera: projection, unprojection and grid calibration.

The radial model maps the incidence angle ``theta`` of a ray to an image
radius ``d(theta) = theta + k1 theta^3 + k2 theta^5`` scaled separately by
``fx`` and ``fy`` along the image axes.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import skew, so3_exp

THETA_MAX = math.radians(75.0)

INTRINSIC_NAMES = ("fx", "fy", "k1", "k2", "u0", "v0")


class DistortionError(ValueError):
    """The radial polynomial cannot be inverted at the requested radius."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    k1: float
    k2: float
    u0: float
    v0: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.k1, self.k2, self.u0, self.v0], dtype=float)

    @classmethod
    def from_array(cls, a) -> "CameraIntrinsics":
        return cls(*(float(x) for x in a))

    def to_json(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(**{k: float(d[k]) for k in INTRINSIC_NAMES})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        K = cls.from_json(json.loads(Path(path).read_text()))
        monotone_limit(K)
        return K


def radial(theta, k1, k2):
    t2 = theta * theta
    return theta * (1.0 + k1 * t2 + k2 * t2 * t2)


def radial_slope(theta, k1, k2):
    t2 = theta * theta
    return 1.0 + 3.0 * k1 * t2 + 5.0 * k2 * t2 * t2


def monotone_limit(K: CameraIntrinsics, theta_max: float = THETA_MAX) -> float:
    """Largest angle in [0, theta_max] up to which d(theta) is increasing.

    d'(theta) is a quadratic in theta^2, so its first positive root is found
    in closed form.
    """
    a, b, c = 5.0 * K.k2, 3.0 * K.k1, 1.0
    # with |a| this small the quadratic's second root lies far beyond theta_max**2
    if abs(a) > 1e-12:
        roots = np.roots([a, b, c])
    else:
        roots = np.array([-c / b]) if b != 0 else np.array([])
    lim = theta_max
    for s in np.atleast_1d(roots):
        if abs(s.imag) < 1e-14 and s.real > 0:
            lim = min(lim, math.sqrt(s.real))
    return lim


def project(K: CameraIntrinsics, p_cam, with_jacobians: bool = False):
    """Project camera-frame points (..., 3) to pixels (..., 2).

    With ``with_jacobians`` also returns d(pixel)/d(point) (..., 2, 3) and
    d(pixel)/d(intrinsics) (..., 2, 6). Points with z <= 0 produce NaN.
    """
    p = np.asarray(p_cam, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho = np.hypot(x, y)
    r3sq = rho * rho + z * z
    theta = np.arctan2(rho, z)
    on_axis = rho == 0.0
    safe_rho = np.where(on_axis, 1.0, rho)
    cphi = np.where(on_axis, 1.0, x / safe_rho)
    sphi = np.where(on_axis, 0.0, y / safe_rho)
    d = radial(theta, K.k1, K.k2)
    uv = np.stack([K.fx * d * cphi + K.u0, K.fy * d * sphi + K.v0], axis=-1)
    bad = ~(z > 0)
    if np.any(bad):
        uv = np.where(bad[..., None], np.nan, uv)
    if not with_jacobians:
        return uv

    dp = radial_slope(theta, K.k1, K.k2)
    # g = d / rho, with its on-axis limit 1 / z
    t2 = theta * theta
    g = np.where(on_axis, 1.0 / np.where(z == 0, 1.0, z), theta / safe_rho) * (1.0 + K.k1 * t2 + K.k2 * t2 * t2)
    zr = z / r3sq
    rr = rho / r3sq
    Jp = np.empty(p.shape[:-1] + (2, 3))
    Jp[..., 0, 0] = K.fx * (dp * cphi * cphi * zr + g * sphi * sphi)
    Jp[..., 0, 1] = K.fx * (dp * cphi * sphi * zr - g * cphi * sphi)
    Jp[..., 0, 2] = -K.fx * dp * cphi * rr
    Jp[..., 1, 0] = K.fy * (dp * sphi * cphi * zr - g * sphi * cphi)
    Jp[..., 1, 1] = K.fy * (dp * sphi * sphi * zr + g * cphi * cphi)
    Jp[..., 1, 2] = -K.fy * dp * sphi * rr

    t3 = t2 * theta
    t5 = t3 * t2
    Jk = np.zeros(p.shape[:-1] + (2, 6))
    Jk[..., 0, 0] = d * cphi
    Jk[..., 0, 2] = K.fx * t3 * cphi
    Jk[..., 0, 3] = K.fx * t5 * cphi
    Jk[..., 0, 4] = 1.0
    Jk[..., 1, 1] = d * sphi
    Jk[..., 1, 2] = K.fy * t3 * sphi
    Jk[..., 1, 3] = K.fy * t5 * sphi
    Jk[..., 1, 5] = 1.0
    return uv, Jp, Jk


def _invert_radial(target, k1, k2, theta_hi):
    """Solve d(theta) = target on [0, theta_hi] by bisection then Newton."""
    lo = np.zeros_like(target)
    hi = np.full_like(target, theta_hi)
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        below = radial(mid, k1, k2) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    th = 0.5 * (lo + hi)
    for _ in range(8):
        f = radial(th, k1, k2) - target
        th = np.clip(th - f / radial_slope(th, k1, k2), 0.0, theta_hi)
    return th


def unproject(K: CameraIntrinsics, q, theta_max: float = THETA_MAX, strict: bool = True):
    """Unit-norm camera-frame rays (..., 3) for pixels (..., 2).

    Pixels beyond the invertible radius raise DistortionError, or map to NaN
    rays when ``strict`` is false.
    """
    q = np.asarray(q, dtype=float)
    mx = (q[..., 0] - K.u0) / K.fx
    my = (q[..., 1] - K.v0) / K.fy
    target = np.hypot(mx, my)
    lim = monotone_limit(K, theta_max)
    d_lim = radial(lim, K.k1, K.k2)
    over = target > d_lim * (1.0 + 1e-12)
    if np.any(over) and strict:
        if lim < theta_max:
            raise DistortionError(
                f"distortion polynomial is non-monotone beyond theta={lim:.4f} rad; "
                f"{int(over.sum())} pixel(s) fall outside the invertible radius"
            )
        raise DistortionError(f"{int(over.sum())} pixel(s) lie beyond theta_max={theta_max:.4f} rad")
    theta = _invert_radial(np.where(over, 0.0, target), K.k1, K.k2, lim)
    theta = np.where(over, np.nan, theta)
    on_axis = target == 0.0
    safe = np.where(on_axis, 1.0, target)
    c = np.where(on_axis, 1.0, mx / safe)
    s = np.where(on_axis, 0.0, my / safe)
    st = np.sin(theta)
    return np.stack([st * c, st * s, np.cos(theta)], axis=-1)


# --- calibration -------------------------------------------------------------


def calibrate(views, K0: CameraIntrinsics, options=None):
    """Refine intrinsics (and view poses) from grid-point correspondences.

    ``views`` is a sequence of ``(grid_points (N,3), pixels (N,2), (R, t))``
    with ``R, t`` the initial world-to-camera pose of each view. Returns
    ``(K, poses, report)``.
    """
    from .lm import Problem, SolverOptions, solve

    if len(views) < 3:
        raise ValueError(f"calibration needs at least 3 views, got {len(views)}")
    pts, obs, poses = [], [], []
    for i, (X, q, (R, t)) in enumerate(views):
        X = np.asarray(X, float)
        if len(X) < 6:
            raise ValueError(f"view {i} has {len(X)} grid points; need at least 6")
        pts.append(X)
        obs.append(np.asarray(q, float))
        poses.append((np.asarray(R, float), np.asarray(t, float)))
    nv = len(views)
    view_of = np.concatenate([np.full(len(X), i) for i, X in enumerate(pts)])
    Xall = np.concatenate(pts)
    qall = np.concatenate(obs)
    m = len(Xall)

    def unpack(x):
        return CameraIntrinsics.from_array(x["k"]), x["R"], x["t"]

    def residuals(x):
        K, Rs, ts = unpack(x)
        pc = np.einsum("nij,nj->ni", Rs[view_of], Xall) + ts[view_of]
        uv, Jp, Jk = project(K, pc, with_jacobians=True)
        r = (uv - qall).reshape(-1)
        J = np.zeros((m, 2, 6 + 6 * nv))
        J[:, :, :6] = Jk
        # left perturbation: d(R X + t)/d(omega) = -[R X + t]_x
        Jw = -Jp @ skew(pc)
        for i in range(nv):
            sel = view_of == i
            J[sel, :, 6 + 6 * i:9 + 6 * i] = Jw[sel]
            J[sel, :, 9 + 6 * i:12 + 6 * i] = Jp[sel]
        return r, J.reshape(2 * m, -1)

    def update(x, dx):
        Rs = x["R"].copy()
        ts = x["t"].copy()
        for i in range(nv):
            w = dx[6 + 6 * i:9 + 6 * i]
            tau = dx[9 + 6 * i:12 + 6 * i]
            dR = so3_exp(w)
            Rs[i] = dR @ Rs[i]
            ts[i] = dR @ ts[i] + tau
        return {"k": x["k"] + dx[:6], "R": Rs, "t": ts}

    x0 = {
        "k": K0.as_array(),
        "R": np.stack([p[0] for p in poses]),
        "t": np.stack([p[1] for p in poses]),
    }
    problem = Problem(residuals, x0, update=update, block_of_row=np.repeat(np.arange(m), 2))
    r0, J0 = residuals(x0)
    sv = np.linalg.svd(J0, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-12:
        raise ValueError(f"calibration normal equations are rank deficient (condition {sv[0] / max(sv[-1], 1e-300):.3g})")
    x, report = solve(problem, options or SolverOptions(max_iterations=100))
    K, Rs, ts = unpack(x)
    return K, list(zip(Rs, ts)), report
