"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

Run alone with ``pytest -m acceptance -s``. The pipeline criteria (5, 6, 7,
9, 10) reconstruct full synthetic networks and take tens of minutes on one
core.
"""
import math
import time

import numpy as np
import pytest

from pipesfm.ba import cylinder_residual, reprojection_residual
from pipesfm.camera import CameraIntrinsics, project
from pipesfm.conic import (
    Cylinder,
    compose_cone,
    cone_from_nine_points,
    decompose_cone,
    linear_residual,
    normalize_quadric,
)
from pipesfm.evaluate import radius_rmse
from pipesfm.experiment import SceneCache, run_scene
from pipesfm.geometry import so3_exp
from pipesfm.lm import Problem, SolverOptions, solve

pytestmark = pytest.mark.acceptance

K_LENS = CameraIntrinsics(fx=480.0, fy=480.0, k1=-0.1667, k2=0.00833, u0=512.0, v0=384.0)
FD_STEP = 1e-6
# residual calibration error of the ordering runs: k1 off by +2 %
K1_ERROR = 0.02

_cache = SceneCache()
_records = {}


def _record(preset, seed, constrained, k1_rel):
    key = (preset, seed, constrained, k1_rel)
    if key not in _records:
        _records[key] = run_scene(preset, seed, constrained, k1_rel, cache=_cache)
    return _records[key]


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def _random_pose(rng, spread=5.0):
    return so3_exp(rng.normal(size=3) * 2.0), rng.normal(0, spread, 3)


def _line_angle(d1, d2):
    return math.atan2(np.linalg.norm(np.cross(d1, d2)), abs(float(np.dot(d1, d2))))


# --- 1 ------------------------------------------------------------------------------


def test_criterion_1_nine_point_oracle(verdict):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        c = rng.uniform(0.01, 0.3)
        R, t = _random_pose(rng)
        z = rng.uniform(0.5, 2.0, 9)
        phi = rng.uniform(0, 2 * math.pi, 9)
        Y = np.stack([z / c * np.cos(phi), z / c * np.sin(phi), z], 1)
        C = normalize_quadric(cone_from_nine_points((Y - t) @ R))
        C_true = normalize_quadric(compose_cone(c, R, t))
        err = min(np.linalg.norm(C - C_true), np.linalg.norm(C + C_true))
        worst = max(worst, err)
    dt = time.perf_counter() - t0
    verdict(1, worst < 1e-6 and dt < 5.0, f"500 cones, worst relative Frobenius {worst:.2e} (< 1e-6), {dt:.2f} s (< 5 s)")


# --- 2 ------------------------------------------------------------------------------


def test_criterion_2_decomposition_roundtrip(verdict):
    rng = np.random.default_rng(102)
    worst_c, worst_axis = 0.0, 0.0
    for _ in range(500):
        c = rng.uniform(0.01, 0.3)
        R, t = _random_pose(rng)
        C1 = normalize_quadric(compose_cone(c, R, t))
        c2, R2, t2 = decompose_cone(C1, direction=R[2])
        C2 = normalize_quadric(compose_cone(c2, R2, t2))
        worst_c = max(worst_c, np.linalg.norm(C1 - C2))
        worst_axis = max(worst_axis, _line_angle(R2[2], R[2]))
    ok = worst_c < 1e-8 and worst_axis < 1e-8
    verdict(2, ok, f"500 cones, Frobenius {worst_c:.2e} (< 1e-8), axis {worst_axis:.2e} rad (< 1e-8)")


# --- 3 ------------------------------------------------------------------------------


def _rel(J, F):
    return np.linalg.norm(J - F) / max(np.linalg.norm(F), 1e-12)


def _camera_points(rng, n):
    theta = rng.uniform(0.02, math.radians(70), n)
    phi = rng.uniform(-math.pi, math.pi, n)
    d = rng.uniform(2, 60, n)
    return d[:, None] * np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], 1)


def _fd_projection(rng, n=1000):
    p = _camera_points(rng, n)
    _, Jp, Jk = project(K_LENS, p, with_jacobians=True)
    Fp, Fk = np.zeros_like(Jp), np.zeros_like(Jk)
    for i in range(3):
        e = np.zeros(3)
        e[i] = FD_STEP
        Fp[:, :, i] = (project(K_LENS, p + e) - project(K_LENS, p - e)) / (2 * FD_STEP)
    for i in range(6):
        a, b = K_LENS.as_array(), K_LENS.as_array()
        a[i] += FD_STEP
        b[i] -= FD_STEP
        Fk[:, :, i] = (project(CameraIntrinsics.from_array(a), p) - project(CameraIntrinsics.from_array(b), p)) / (2 * FD_STEP)
    return max(max(_rel(Jp[k], Fp[k]), _rel(Jk[k], Fk[k])) for k in range(n))


def _fd_reprojection(rng, n=1000):
    R = np.array([so3_exp(rng.normal(0, 1.5, 3)) for _ in range(n)])
    t = rng.normal(0, 20, (n, 3))
    X = np.einsum("nji,nj->ni", R, _camera_points(rng, n) - t)
    q = rng.uniform(0, 800, (n, 2))
    _, Jpose, JX, JK, _ = reprojection_residual(K_LENS, R, t, X, q, with_jacobians=True)
    F = np.zeros((n, 2, 15))
    h = FD_STEP
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        F[:, :, i] = (reprojection_residual(K_LENS, so3_exp(e) @ R, t @ so3_exp(e).T, X, q)
                      - reprojection_residual(K_LENS, so3_exp(-e) @ R, t @ so3_exp(-e).T, X, q)) / (2 * h)
        F[:, :, 3 + i] = (reprojection_residual(K_LENS, R, t + e, X, q) - reprojection_residual(K_LENS, R, t - e, X, q)) / (2 * h)
        F[:, :, 6 + i] = (reprojection_residual(K_LENS, R, t, X + e, q) - reprojection_residual(K_LENS, R, t, X - e, q)) / (2 * h)
    J = np.concatenate([Jpose, JX], axis=2)
    worst = max(_rel(J[k], F[k, :, :9]) for k in range(n))
    for i in range(6):
        a, b = K_LENS.as_array(), K_LENS.as_array()
        a[i] += h
        b[i] -= h
        F[:, :, 9 + i] = (reprojection_residual(CameraIntrinsics.from_array(a), R, t, X, q)
                          - reprojection_residual(CameraIntrinsics.from_array(b), R, t, X, q)) / (2 * h)
    return max(worst, max(_rel(JK[k], F[k, :, 9:]) for k in range(n)))


def _fd_cylinder(rng, n=1000):
    worst = 0.0
    for k in range(n):
        R = so3_exp(rng.normal(0, 1.5, 3))
        t = rng.normal(0, 20, 3)
        # 30 % of the points within 1e-2 .. 1 mm of the axis
        rho = 10 ** rng.uniform(-2, 0) if k % 10 < 3 else rng.uniform(1, 20)
        a = rng.uniform(-math.pi, math.pi)
        X = (R.T @ (np.array([rho * math.cos(a), rho * math.sin(a), rng.uniform(-30, 30)]) - t))[None]
        _, JX, Ja = cylinder_residual(X, R, t, 8.05, with_jacobians=True)
        F = np.zeros(7)
        for i in range(3):
            e = np.zeros(3)
            e[i] = FD_STEP
            F[i] = (cylinder_residual(X + e, R, t, 8.05)[0] - cylinder_residual(X - e, R, t, 8.05)[0]) / (2 * FD_STEP)
        for i in range(4):
            d = np.zeros(4)
            d[i] = FD_STEP
            vals = []
            for s in (1, -1):
                dR = so3_exp(np.array([s * d[0], s * d[1], 0.0]))
                vals.append(cylinder_residual(X, dR @ R, dR @ t + s * np.array([d[2], d[3], 0.0]), 8.05)[0])
            F[3 + i] = (vals[0] - vals[1]) / (2 * FD_STEP)
        worst = max(worst, _rel(np.concatenate([JX[0], Ja[0]]), F))
    return worst


def _fd_cone_refinement(rng, n=1000):
    worst = 0.0
    for _ in range(n):
        R, t = so3_exp(rng.normal(size=3) * 2.0), rng.normal(0, 2.0, 3)
        a, tau = rng.uniform(2, 10), rng.uniform(-0.3, 0.3)
        X = rng.normal(0, 8, (1, 3))
        _, J = linear_residual(R, t, a, tau, X, with_jacobian=True)
        F = np.zeros(6)
        for k in range(6):
            vals = []
            for s in (1, -1):
                d = np.zeros(6)
                d[k] = s * FD_STEP
                dR = so3_exp(np.array([d[0], d[1], 0.0]))
                vals.append(linear_residual(dR @ R, dR @ t + np.array([d[2], d[3], 0.0]), a + d[4], tau + d[5], X)[0])
            F[k] = (vals[0] - vals[1]) / (2 * FD_STEP)
        worst = max(worst, _rel(J[0], F))
    return worst


def test_criterion_3_jacobian_suite(verdict):
    rng = np.random.default_rng(103)
    errs = {
        "projection": _fd_projection(rng),
        "reprojection": _fd_reprojection(rng),
        "cylinder": _fd_cylinder(rng),
        "cone refinement": _fd_cone_refinement(rng),
    }
    ok = all(v < 1e-4 for v in errs.values())
    verdict(3, ok, "1000 configs each, worst relative error: " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# --- 4 ------------------------------------------------------------------------------


def test_criterion_4_solver_contract(verdict):
    rng = np.random.default_rng(104)
    increases = 0
    runs = 0
    for _ in range(50):
        c = rng.normal(size=3)
        t = np.linspace(0, 1, 40)
        y = c[0] * np.exp(c[1] * t) + c[2]
        y[::9] += rng.normal(0, 5, len(y[::9]))

        def fun(x):
            e = np.exp(x[1] * t)
            return x[0] * e + x[2] - y, np.stack([e, x[0] * t * e, np.ones_like(t)], 1)

        for scale in (np.inf, 0.5):
            _, rep = solve(Problem(fun, rng.normal(size=3), loss_scale=scale), SolverOptions(max_iterations=100))
            increases += int(np.any(np.diff(rep.history) > 0))
            runs += 1
    lin_err, lin_steps = 0.0, set()
    for _ in range(20):
        A = rng.normal(size=(30, 6))
        b = rng.normal(size=30)
        x, rep = solve(Problem(lambda x, A=A, b=b: (A @ x - b, A), np.zeros(6)))
        lin_err = max(lin_err, np.max(np.abs(x - np.linalg.lstsq(A, b, rcond=None)[0])))
        lin_steps.add(rep.iterations)
    ok = increases == 0 and lin_err < 1e-10 and lin_steps == {1}
    verdict(4, ok, f"{runs} nonlinear runs with {increases} cost increases; linear: max error {lin_err:.1e}, accepted steps {sorted(lin_steps)}")


# --- 5 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_scale_drift(verdict):
    free = _record("network-a", 0, False, K1_ERROR)
    cons = _record("network-a", 0, True, K1_ERROR)
    ratios = [r for _, r, _ in free.profile]
    dev = [r - 1.0 for r in ratios]
    steps = np.diff(dev)
    monotone = len(steps) > 0 and (np.all(steps > 0) or np.all(steps < 0))
    final = abs(dev[-1]) if dev else 0.0
    seconds = free.seconds + cons.seconds
    ok = monotone and final >= 0.10 and cons.rmse <= 0.05 and seconds < 300
    verdict(5, ok, (f"unconstrained segment radii {[round(r, 3) for r in ratios]} (monotone {monotone}, final {final:.1%} >= 10%); "
                    f"constrained RMSE {cons.rmse:.4f} (<= 0.05); paired runtime {seconds:.0f} s (< 300)"))


# --- 6 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_ordering(verdict):
    lines, ok = [], True
    for preset in ("network-a", "network-b", "network-c"):
        for seed in range(5):
            free = _record(preset, seed, False, K1_ERROR)
            cons = _record(preset, seed, True, K1_ERROR)
            good = cons.rmse < free.rmse
            ok &= good
            lines.append(f"{preset[-1].upper()}{seed} {cons.rmse:.4f}<{free.rmse:.4f}{'' if good else ' (!)'}")
    verdict(6, ok, "constrained<unconstrained RMSE, k1 +2 %: " + ", ".join(lines))


# --- 7 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_instance_count(verdict):
    lines, ok = [], True
    for seed in range(3):
        rec = _record("network-d", seed, True, 0.0)
        axes = [a for a in rec.axis_errors_deg if a is not None]
        good = rec.n_pipes == 7 and len(axes) == 7 and max(axes) < 2.0
        ok &= good
        lines.append(f"seed {seed}: {rec.n_pipes} instances, max axis error {max(axes, default=float('nan')):.2f} deg")
    verdict(7, ok, "; ".join(lines))


# --- 8 ------------------------------------------------------------------------------


def test_criterion_8_eq9_arithmetic(verdict):
    axis = Cylinder(np.eye(3), np.zeros(3), 10.0)
    on_wall = np.array([[10.0, 0.0, 0.0], [0.0, 10.0, 1.0], [-10.0, 0.0, 2.0], [0.0, -10.0, 3.0]])
    split = np.array([[11.0, 0.0, 0.0], [0.0, 11.0, 1.0], [9.0, 0.0, 2.0], [0.0, -9.0, 3.0]])
    a = radius_rmse(on_wall, np.zeros(4, int), [axis], 10.0).overall
    b = radius_rmse(split, np.zeros(4, int), [axis], 10.0).overall
    verdict(8, a == 0.0 and b == 0.1, f"all at r -> {a!r}; half 1.1r, half 0.9r -> {b!r}")


# --- 9 ------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_determinism(verdict):
    first = _record("network-b", 0, True, K1_ERROR)
    again = run_scene("network-b", 0, True, K1_ERROR, cache=SceneCache())
    same = first.model_json == again.model_json
    verdict(9, same, f"network-b seed 0 constrained rerun from a fresh simulation: model JSON {len(first.model_json)} bytes, identical {same}")


# --- 10 -----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_cylinder_regime(verdict):
    try:
        rec = _record("cylinder", 0, True, 0.0)
    except Exception as e:  # noqa: BLE001  (any failure is the finding)
        verdict(10, False, f"pipeline raised {type(e).__name__}: {e}")
        return
    import json

    kinds = [p["kind"] for p in json.loads(rec.model_json)["pipes"]]
    ok = rec.rmse < 1e-3 and rec.registered == rec.n_frames
    verdict(10, ok, f"noiseless single tube: {rec.registered}/{rec.n_frames} frames, instances {kinds}, RMSE {rec.rmse:.2e} (< 1e-3)")
