"""Robust Levenberg-Marquardt least squares.

Residual rows are grouped into blocks; each block ``b`` contributes
``weight_b * rho_b(||r_b||)`` to the cost, where ``rho`` is the Cauchy loss
with per-block scale (``inf`` meaning the plain ``s^2 / 2``). Robust losses
are handled by iteratively reweighted normal equations.

Problems whose trailing parameters are independent 3-vectors (scene points)
can ask for those to be eliminated by a Schur complement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp


def cauchy(s2, scale):
    """Cauchy loss of a squared norm; reduces to s2 / 2 for an infinite scale."""
    s2 = np.asarray(s2, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), s2.shape)
    finite = np.isfinite(scale)
    sc2 = np.where(finite, scale, 1.0) ** 2
    return np.where(finite, 0.5 * sc2 * np.log1p(s2 / sc2), 0.5 * s2)


def cauchy_weight(s2, scale):
    """IRLS weight 2 * d rho / d(s^2); equals 1 at s = 0."""
    s2 = np.asarray(s2, dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), s2.shape)
    finite = np.isfinite(scale)
    sc2 = np.where(finite, scale, 1.0) ** 2
    return np.where(finite, 1.0 / (1.0 + s2 / sc2), 1.0)


@dataclass
class SolverOptions:
    max_iterations: int = 50
    function_tolerance: float = 1e-8
    gradient_tolerance: float = 1e-10
    # 0 means the first trial step is a pure Gauss-Newton step
    initial_damping: float = 0.0
    max_damping: float = 1e12


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: str
    history: list = field(default_factory=list)
    term_costs: dict = field(default_factory=dict)
    evaluations: int = 0

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination": self.termination,
            "term_costs": dict(self.term_costs),
            "history": list(self.history),
        }


class Problem:
    """A robust least-squares problem.

    ``fun(x)`` returns ``(r, J)``; ``J`` may be dense or scipy-sparse. ``x``
    can be any object as long as ``update(x, dx)`` understands it.
    """

    def __init__(
        self,
        fun,
        x0,
        *,
        update=None,
        block_of_row=None,
        loss_scale=None,
        weight=None,
        terms=None,
        n_point_blocks: int = 0,
        block_names=None,
    ):
        self.fun = fun
        self.x0 = x0
        self.update = update or (lambda x, dx: x + dx)
        self.block_of_row = None if block_of_row is None else np.asarray(block_of_row, dtype=np.int64)
        self.loss_scale = loss_scale
        self.weight = weight
        self.terms = terms or {}
        self.n_point_blocks = n_point_blocks
        self.block_names = block_names

    def _blocks(self, m):
        if self.block_of_row is None:
            self.block_of_row = np.arange(m)
        nb = int(self.block_of_row.max()) + 1 if m else 0
        scale = np.full(nb, np.inf) if self.loss_scale is None else np.broadcast_to(np.asarray(self.loss_scale, float), (nb,))
        weight = np.ones(nb) if self.weight is None else np.broadcast_to(np.asarray(self.weight, float), (nb,))
        return nb, scale, weight

    def block_costs(self, r):
        nb, scale, weight = self._blocks(len(r))
        s2 = np.bincount(self.block_of_row, weights=r * r, minlength=nb)
        return weight * cauchy(s2, scale), s2

    def cost(self, r) -> float:
        return float(self.block_costs(r)[0].sum())

    def row_weights(self, r):
        nb, scale, weight = self._blocks(len(r))
        s2 = np.bincount(self.block_of_row, weights=r * r, minlength=nb)
        return (weight * cauchy_weight(s2, scale))[self.block_of_row]

    def term_costs(self, r) -> dict:
        bc, _ = self.block_costs(r)
        out = {name: float(bc[mask].sum()) for name, mask in self.terms.items()}
        return out


def _check_finite(problem: Problem, r, J):
    bad_rows = ~np.isfinite(r)
    if sp.issparse(J):
        Jc = J.tocoo()
        bad = ~np.isfinite(Jc.data)
        if bad.any():
            bad_rows[Jc.row[bad]] = True
    else:
        bad_rows |= ~np.all(np.isfinite(J), axis=1)
    if bad_rows.any():
        row = int(np.flatnonzero(bad_rows)[0])
        problem._blocks(len(r))
        b = int(problem.block_of_row[row])
        name = problem.block_names(b) if callable(problem.block_names) else f"block {b}"
        raise ValueError(f"non-finite residual or Jacobian at the initial point in {name} (row {row})")


def _normal_equations(J, w, r):
    if sp.issparse(J):
        J = J.tocsr()
        WJ = sp.diags(w) @ J
        H = (J.T @ WJ).tocsr()
        g = np.asarray(J.T @ (w * r)).ravel()
    else:
        WJ = J * w[:, None]
        H = J.T @ WJ
        g = J.T @ (w * r)
    return H, g


def _damp_diag(H, lam):
    d = H.diagonal() if sp.issparse(H) else np.diag(H)
    return lam * np.clip(d, 1e-9, 1e32)


def _solve_dense(H, rhs):
    try:
        c = scipy.linalg.cho_factor(H, check_finite=False)
        x = scipy.linalg.cho_solve(c, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    return x if np.all(np.isfinite(x)) else None


def _solve_step(H, g, lam, n_pts):
    n = len(g)
    damp = _damp_diag(H, lam) if lam > 0 else np.zeros(n)
    if n_pts == 0:
        A = H.toarray() if sp.issparse(H) else H.copy()
        A[np.diag_indices(n)] += damp
        return _solve_dense(A, -g)

    ng = n - 3 * n_pts
    H = H.tocsr() if sp.issparse(H) else sp.csr_matrix(H)
    Hpp = H[ng:, ng:].tocoo()
    blocks = np.zeros((n_pts, 3, 3))
    np.add.at(blocks, (Hpp.row // 3, Hpp.row % 3, Hpp.col % 3), Hpp.data)
    idx = np.arange(3)
    blocks[:, idx, idx] += damp[ng:].reshape(n_pts, 3)
    try:
        np.linalg.cholesky(blocks)
    except np.linalg.LinAlgError:
        return None
    Minv = np.linalg.inv(blocks)
    gp = g[ng:].reshape(n_pts, 3)
    Minv_gp = np.einsum("pij,pj->pi", Minv, gp).ravel()
    if ng == 0:
        dx = -Minv_gp
        return dx if np.all(np.isfinite(dx)) else None
    Minv_sp = sp.bsr_matrix((Minv, np.arange(n_pts), np.arange(n_pts + 1)), shape=(3 * n_pts, 3 * n_pts)).tocsr()
    Hgp = H[:ng, ng:]
    if ng <= 256:
        B = Hgp.toarray().reshape(ng, n_pts, 3)
        BM = np.einsum("gpi,pij->gpj", B, Minv).reshape(ng, -1)
        S = H[:ng, :ng].toarray() - BM @ B.reshape(ng, -1).T
    else:
        S = (H[:ng, :ng] - Hgp @ Minv_sp @ Hgp.T).toarray()
    S[np.diag_indices(ng)] += damp[:ng]
    rhs = -g[:ng] + Hgp @ Minv_gp
    dg = _solve_dense(S, rhs)
    if dg is None:
        return None
    dp = -Minv_gp - Minv_sp @ (Hgp.T @ dg)
    dx = np.concatenate([dg, dp])
    return dx if np.all(np.isfinite(dx)) else None


def solve(problem: Problem, options: SolverOptions | None = None):
    """Minimize the problem's cost from ``problem.x0``.

    Returns ``(x, SolveReport)``. Only steps that strictly decrease the cost
    are accepted.
    """
    opt = options or SolverOptions()
    x = problem.x0
    r, J = problem.fun(x)
    r = np.asarray(r, dtype=float)
    _check_finite(problem, r, J)
    cost = problem.cost(r)
    report = SolveReport(0, cost, cost, "max_iterations", history=[cost], evaluations=1)
    lam = opt.initial_damping
    n_pts = problem.n_point_blocks

    H = None
    for _ in range(opt.max_iterations):
        if cost == 0.0:
            report.termination = "zero_cost"
            break
        if H is None:  # rejected steps keep the linearization
            w = problem.row_weights(r)
            H, g = _normal_equations(J, w, r)
        if np.max(np.abs(g), initial=0.0) < opt.gradient_tolerance:
            report.termination = "gradient_tolerance"
            break
        dx = _solve_step(H, g, lam, n_pts)
        accepted = False
        if dx is not None:
            try:
                # a wild trial step may overflow; it is simply rejected
                with np.errstate(over="ignore", invalid="ignore"):
                    x_new = problem.update(x, dx)
                    r_new, J_new = problem.fun(x_new)
                    r_new = np.asarray(r_new, dtype=float)
                    cost_new = problem.cost(r_new)
            except (ValueError, FloatingPointError, np.linalg.LinAlgError):
                cost_new = np.inf
            report.evaluations += 1
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
        if accepted:
            rel = (cost - cost_new) / cost
            x, r, J, cost = x_new, r_new, J_new, cost_new
            H = None
            report.iterations += 1
            report.history.append(cost)
            lam = lam / 4.0 if lam > 1e-6 else 0.0
            if rel < opt.function_tolerance:
                report.termination = "function_tolerance"
                break
        else:
            lam = 1e-4 if lam == 0.0 else lam * 10.0
            if lam > opt.max_damping:
                report.termination = "damping_limit"
                break

    report.final_cost = cost
    report.term_costs = problem.term_costs(r)
    return x, report
