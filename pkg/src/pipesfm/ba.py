"""Bundle adjustment with the reprojection term and the cylinder term.

    E = sum_obs rho_1(||q - pi(K, R X + t)||) + alpha * sum_pipe sum_inlier rho_s(r - d(X, axis))

Poses are world-to-camera and are updated on the left, ``R <- Exp(w) R``,
``t <- Exp(w) t + tau``. Pipe axes use the same update restricted to the four
degrees of freedom that move the axis line (rotation about and translation
along the axis leave point-to-axis distances unchanged).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .camera import CameraIntrinsics, project
from .geometry import orthonormal_basis, skew, so3_exp
from .lm import Problem, SolveReport, SolverOptions, solve

BEHIND_RESIDUAL = 1e3


def reprojection_residual(K: CameraIntrinsics, R, t, X, q, with_jacobians=False):
    """``q - project(K, R X + t)`` for batches of observations.

    With Jacobians returns ``(r, J_pose (n,2,6) [w, tau], J_X (n,2,3),
    J_K (n,2,6), ok)``; rows with the point behind the camera get a constant
    large residual, zero Jacobians and ``ok = False``.
    """
    R = np.asarray(R, dtype=float)
    X = np.asarray(X, dtype=float)
    pc = np.einsum("...ij,...j->...i", R, X) + t
    ok = pc[..., 2] > 1e-9
    pcs = np.where(ok[..., None], pc, np.array([0.0, 0.0, 1.0]))
    if not with_jacobians:
        r = q - project(K, pcs)
        return np.where(ok[..., None], r, BEHIND_RESIDUAL)
    uv, Jp, Jk = project(K, pcs, with_jacobians=True)
    r = np.where(ok[..., None], q - uv, BEHIND_RESIDUAL)
    Jp = Jp * ok[..., None, None]
    J_pose = np.concatenate([Jp @ skew(pcs), -Jp], axis=-1)
    J_X = -Jp @ R
    J_K = -Jk * ok[..., None, None]
    return r, J_pose, J_X, J_K, ok


def axis_distance(X, R, t):
    """Distance from points to the z-axis of the frame ``X' = R X + t``."""
    Y = np.asarray(X, dtype=float) @ np.asarray(R).T + t
    return np.hypot(Y[..., 0], Y[..., 1])


def cylinder_residual(X, R, t, r, with_jacobians=False):
    """``r - axis_distance(X)``; Jacobians w.r.t. X (n,3) and the axis tangent (n,4).

    The axis tangent is ``[w_x, w_y, tau_x, tau_y]`` of the left update in the
    axis frame. The radial direction is guarded at rho > 1e-9.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = X @ np.asarray(R).T + t
    rho = np.hypot(Y[:, 0], Y[:, 1])
    res = r - rho
    if not with_jacobians:
        return res
    safe = rho > 1e-9
    rs = np.where(safe, rho, 1.0)
    g = np.stack([Y[:, 0] / rs, Y[:, 1] / rs, np.zeros(len(Y))], axis=1) * safe[:, None]
    J_X = -g @ R
    # dY/dw = -[Y]x, so d(-rho)/dw = g [Y]x
    J_axis = np.concatenate([np.einsum("ni,nij->nj", g, skew(Y))[:, :2], -g[:, :2]], axis=1)
    return res, J_X, J_axis


@dataclass
class BAOptions:
    alpha: float = 10.0
    reprojection_scale: float = 1.0  # Cauchy scale in px
    cylinder_scale: float = 0.05  # Cauchy scale as a fraction of the radius
    max_iterations: int = 20
    function_tolerance: float = 1e-6
    gradient_tolerance: float = 1e-10


@dataclass
class BAResult:
    report: SolveReport
    n_frames: int
    n_points: int
    n_pipes: int
    n_observations: int
    extra: dict = field(default_factory=dict)


class _Layout:
    """Column bookkeeping for one BA problem."""

    def __init__(self, frames, baseline_frame, free_K, pipes, points):
        self.frames = np.asarray(frames, dtype=np.int64)
        self.pipes = np.asarray(pipes, dtype=np.int64)
        self.points = np.asarray(points, dtype=np.int64)
        dof = np.where(self.frames == baseline_frame, 5, 6)
        self.frame_dof = dof
        self.frame_col = np.concatenate([[0], np.cumsum(dof)])[:-1]
        n = int(dof.sum())
        self.K_col = n if free_K else -1
        n += 6 if free_K else 0
        self.pipe_col = n + 4 * np.arange(len(self.pipes))
        n += 4 * len(self.pipes)
        self.n_global = n
        self.point_col = n + 3 * np.arange(len(self.points))
        self.n = n + 3 * len(self.points)


def _baseline_basis(t):
    """Two unit vectors spanning the plane orthogonal to t."""
    return orthonormal_basis(t)


def build_problem(model, free_frames, points, *, free_intrinsics=False, free_pipes=(), options=None, fix_baseline=None):
    """Assemble the robust least-squares problem over the given free variables.

    ``points`` are the point ids whose positions are free; every valid
    observation of those points in a registered frame contributes a
    reprojection block, and every one of them assigned to a pipe contributes
    a cylinder block (when ``alpha > 0``). Frames not in ``free_frames`` and
    pipes not in ``free_pipes`` are held fixed. ``fix_baseline`` names a
    frame whose distance from the world origin is kept (scale gauge).
    Returns ``(problem, apply)``; ``apply(x)`` writes a solution back.
    """
    opt = options or BAOptions()
    free_frames = np.asarray(sorted(set(int(f) for f in free_frames)), dtype=np.int64)
    points = np.asarray(points, dtype=np.int64)
    pipes_free = np.asarray(sorted(set(int(i) for i in free_pipes)), dtype=np.int64) if opt.alpha > 0 else np.zeros(0, np.int64)
    if fix_baseline is not None and fix_baseline not in set(free_frames.tolist()):
        fix_baseline = None
    lay = _Layout(free_frames, fix_baseline, free_intrinsics, pipes_free, points)

    obs = model.track_obs(points)
    obs = obs[model.obs_valid[obs] & model.registered[model.obs_frame[obs]]]
    o_frame = model.obs_frame[obs]
    o_point = model.obs_track[obs]
    o_uv = model.obs_uv[obs]
    n_obs = len(obs)

    frame_slot = np.full(model.n_frames, -1, dtype=np.int64)
    frame_slot[free_frames] = np.arange(len(free_frames))
    point_slot = np.full(len(model.has_point), -1, dtype=np.int64)
    point_slot[points] = np.arange(len(points))
    pipe_slot = np.full(max(len(model.pipes), 1), -1, dtype=np.int64)
    pipe_slot[pipes_free] = np.arange(len(pipes_free))

    if opt.alpha > 0:
        pp = model.point_pipe[points]
        c_sel = np.flatnonzero(pp >= 0)
        c_point = points[c_sel]
        c_pipe = pp[c_sel]
    else:
        c_point = np.zeros(0, np.int64)
        c_pipe = np.zeros(0, np.int64)
    n_cyl = len(c_point)
    radius = np.array([p.radius for p in model.pipes]) if model.pipes else np.zeros(1)

    # fixed structure of the Jacobian
    of = frame_slot[o_frame]
    o_free = of >= 0
    o_pcol = lay.point_col[point_slot[o_point]]
    cf = pipe_slot[c_pipe] if n_cyl else np.zeros(0, np.int64)
    c_free = cf >= 0
    c_pcol = lay.point_col[point_slot[c_point]]

    rows_rep = 2 * np.arange(n_obs)
    rows_cyl = 2 * n_obs + np.arange(n_cyl)

    def state0():
        return {
            "R": model.R[free_frames].copy(),
            "t": model.t[free_frames].copy(),
            "K": model.K.as_array(),
            "AR": np.array([model.pipes[i].R for i in pipes_free]).reshape(-1, 3, 3),
            "At": np.array([model.pipes[i].t for i in pipes_free]).reshape(-1, 3),
            "X": model.X[points].copy(),
        }

    def poses(x):
        R = model.R[o_frame].copy()
        t = model.t[o_frame].copy()
        R[o_free] = x["R"][of[o_free]]
        t[o_free] = x["t"][of[o_free]]
        return R, t

    def axes(x):
        AR = np.array([p.R for p in model.pipes]).reshape(-1, 3, 3)[c_pipe]
        At = np.array([p.t for p in model.pipes]).reshape(-1, 3)[c_pipe]
        if n_cyl and c_free.any():
            AR[c_free] = x["AR"][cf[c_free]]
            At[c_free] = x["At"][cf[c_free]]
        return AR, At

    def fun(x):
        K = CameraIntrinsics.from_array(x["K"])
        R, t = poses(x)
        Xo = x["X"][point_slot[o_point]]
        r_rep, Jpose, JX, JK, _ = reprojection_residual(K, R, t, Xo, o_uv, with_jacobians=True)
        rows, cols, vals = [], [], []
        # point columns
        rows.append(np.broadcast_to(rows_rep[:, None, None] + np.arange(2)[None, :, None], (n_obs, 2, 3)).ravel())
        cols.append(np.broadcast_to(o_pcol[:, None, None] + np.arange(3)[None, None, :], (n_obs, 2, 3)).ravel())
        vals.append(JX.ravel())
        # pose columns
        if o_free.any():
            idx = np.flatnonzero(o_free)
            Jp = Jpose[idx]
            fcol = lay.frame_col[of[idx]]
            base = fix_baseline is not None
            if base:
                slot_b = int(frame_slot[fix_baseline])
                B = _baseline_basis(x["t"][slot_b])
                is_b = of[idx] == slot_b
                Jb = np.concatenate([Jp[is_b, :, :3], Jp[is_b, :, 3:] @ B], axis=2)
                sel = idx[is_b]
                rows.append(np.broadcast_to(rows_rep[sel][:, None, None] + np.arange(2)[None, :, None], (len(sel), 2, 5)).ravel())
                cols.append(np.broadcast_to(lay.frame_col[of[sel]][:, None, None] + np.arange(5)[None, None, :], (len(sel), 2, 5)).ravel())
                vals.append(Jb.ravel())
                keep = ~is_b
                idx, Jp, fcol = idx[keep], Jp[keep], fcol[keep]
            rows.append(np.broadcast_to(rows_rep[idx][:, None, None] + np.arange(2)[None, :, None], (len(idx), 2, 6)).ravel())
            cols.append(np.broadcast_to(fcol[:, None, None] + np.arange(6)[None, None, :], (len(idx), 2, 6)).ravel())
            vals.append(Jp.ravel())
        if lay.K_col >= 0:
            rows.append(np.broadcast_to(rows_rep[:, None, None] + np.arange(2)[None, :, None], (n_obs, 2, 6)).ravel())
            cols.append(np.broadcast_to(lay.K_col + np.arange(6)[None, None, :], (n_obs, 2, 6)).ravel())
            vals.append(JK.ravel())
        r_all = [r_rep.ravel()]
        if n_cyl:
            AR, At = axes(x)
            Xc = x["X"][point_slot[c_point]]
            Y = np.einsum("nij,nj->ni", AR, Xc) + At
            rho = np.hypot(Y[:, 0], Y[:, 1])
            r_cyl = radius[c_pipe] - rho
            safe = rho > 1e-9
            rs = np.where(safe, rho, 1.0)
            g = np.stack([Y[:, 0] / rs, Y[:, 1] / rs, np.zeros(n_cyl)], axis=1) * safe[:, None]
            JXc = -np.einsum("ni,nij->nj", g, AR)
            rows.append(np.repeat(rows_cyl, 3))
            cols.append((c_pcol[:, None] + np.arange(3)).ravel())
            vals.append(JXc.ravel())
            if c_free.any():
                sel = np.flatnonzero(c_free)
                Ja = np.concatenate([np.einsum("ni,nij->nj", g[sel], skew(Y[sel]))[:, :2], -g[sel, :2]], axis=1)
                rows.append(np.repeat(rows_cyl[sel], 4))
                cols.append((lay.pipe_col[cf[sel]][:, None] + np.arange(4)).ravel())
                vals.append(Ja.ravel())
            r_all.append(r_cyl)
        r = np.concatenate(r_all)
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(r), lay.n),
        )
        return r, J

    def update(x, dx):
        y = dict(x)
        nf = len(free_frames)
        if nf:
            R, t = x["R"].copy(), x["t"].copy()
            for k in range(nf):
                c = lay.frame_col[k]
                w = dx[c:c + 3]
                if lay.frame_dof[k] == 5:
                    B = _baseline_basis(t[k])
                    norm = np.linalg.norm(t[k])
                    dR = so3_exp(w)
                    tn = dR @ t[k] + B @ dx[c + 3:c + 5]
                    R[k] = dR @ R[k]
                    t[k] = tn * (norm / np.linalg.norm(tn))
                else:
                    dR = so3_exp(w)
                    R[k] = dR @ R[k]
                    t[k] = dR @ t[k] + dx[c + 3:c + 6]
            y["R"], y["t"] = R, t
        if lay.K_col >= 0:
            y["K"] = x["K"] + dx[lay.K_col:lay.K_col + 6]
            CameraIntrinsics.from_array(y["K"])
        if len(pipes_free):
            AR, At = x["AR"].copy(), x["At"].copy()
            for k in range(len(pipes_free)):
                c = lay.pipe_col[k]
                dR = so3_exp(np.array([dx[c], dx[c + 1], 0.0]))
                AR[k] = dR @ AR[k]
                At[k] = dR @ At[k] + np.array([dx[c + 2], dx[c + 3], 0.0])
            y["AR"], y["At"] = AR, At
        y["X"] = x["X"] + dx[lay.n_global:].reshape(-1, 3)
        return y

    block = np.concatenate([np.repeat(np.arange(n_obs), 2), n_obs + np.arange(n_cyl)])
    scale = np.concatenate([
        np.full(n_obs, opt.reprojection_scale),
        opt.cylinder_scale * radius[c_pipe] if n_cyl else np.zeros(0),
    ])
    weight = np.concatenate([np.ones(n_obs), np.full(n_cyl, opt.alpha)])
    terms = {"rep": np.arange(n_obs + n_cyl) < n_obs, "cyl": np.arange(n_obs + n_cyl) >= n_obs}

    def names(b):
        if b < n_obs:
            return f"reprojection block (frame {int(o_frame[b])}, point {int(o_point[b])})"
        k = b - n_obs
        return f"cylinder block (pipe {int(c_pipe[k])}, point {int(c_point[k])})"

    prob = Problem(
        fun, state0(), update=update, block_of_row=block, loss_scale=scale, weight=weight,
        terms=terms, n_point_blocks=len(points), block_names=names,
    )

    def apply(x):
        model.R[free_frames] = x["R"]
        model.t[free_frames] = x["t"]
        if lay.K_col >= 0:
            model.K = CameraIntrinsics.from_array(x["K"])
        for k, i in enumerate(pipes_free):
            pipe = model.pipes[i]
            pipe.shape = pipe.shape.with_axis(x["AR"][k], x["At"][k])
        model.X[points] = x["X"]

    prob.n_observations = n_obs
    prob.n_cylinder = n_cyl
    return prob, apply


def _solve_and_apply(model, prob, apply, opt):
    x, report = solve(prob, SolverOptions(
        max_iterations=opt.max_iterations,
        function_tolerance=opt.function_tolerance,
        gradient_tolerance=opt.gradient_tolerance,
    ))
    apply(x)
    return report


def baseline_gauge(model):
    """Frame whose distance to frame 0 fixes the scale while no pipe exists."""
    if model.pipes or model.init_pair is None:
        return None
    return model.init_pair[1]


def local_ba(model, window, options: BAOptions | None = None, free_intrinsics=None):
    """Refine the poses of ``window`` and the points they observe.

    Older poses and pipe axes stay fixed; intrinsics are free when
    ``free_intrinsics`` is true (default: ``model.intrinsics_free``). The
    anchor frame is never moved.
    """
    opt = options or BAOptions()
    window = [int(f) for f in window if model.registered[f] and f != model.anchor]
    pts = model.points_seen_by(window)
    pts = pts[model.has_point[pts]]
    if len(pts) == 0:
        return BAResult(SolveReport(0, 0.0, 0.0, "empty"), len(window), 0, 0, 0)
    free_K = model.intrinsics_free if free_intrinsics is None else free_intrinsics
    prob, apply = build_problem(
        model, window, pts, free_intrinsics=free_K, options=opt,
        fix_baseline=baseline_gauge(model),
    )
    report = _solve_and_apply(model, prob, apply, opt)
    return BAResult(report, len(window), len(pts), 0, prob.n_observations)


def global_ba(model, options: BAOptions | None = None, free_intrinsics=None):
    """Refine everything: poses (anchor fixed), points, intrinsics (if free), pipe axes."""
    opt = options or BAOptions()
    free_K = model.intrinsics_free if free_intrinsics is None else free_intrinsics
    frames = [int(f) for f in np.flatnonzero(model.registered) if f != model.anchor]
    pts = np.flatnonzero(model.has_point)
    prob, apply = build_problem(
        model, frames, pts, free_intrinsics=free_K,
        free_pipes=range(len(model.pipes)), options=opt, fix_baseline=baseline_gauge(model),
    )
    report = _solve_and_apply(model, prob, apply, opt)
    return BAResult(report, len(frames), len(pts), len(model.pipes) if opt.alpha > 0 else 0, prob.n_observations)
