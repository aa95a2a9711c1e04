import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ground_truth_model
from pipesfm.conic import Cylinder
from pipesfm.evaluate import (
    EmptyReportError,
    axis_errors,
    copy_model,
    evaluate,
    export_ply,
    format_table,
    load_model_json,
    model_to_json,
    posthoc_fit_and_scale,
    radius_rmse,
    save_model_json,
    segment_radius_profile,
)
from pipesfm.geometry import look_rotation, so3_exp
from pipesfm.model import PipeInstance, ReconstructionModel
from pipesfm.sim import ground_truth_json, load_ground_truth, load_preset, simulate

Z_AXIS = Cylinder(np.eye(3), np.zeros(3), 10.0)


def _ring(radius, n=40, z0=0.0):
    a = np.linspace(0, 2 * math.pi, n, endpoint=False)
    return np.stack([radius * np.cos(a), radius * np.sin(a), z0 + np.arange(n) * 0.5], 1)


def test_rmse_zero_on_the_wall():
    X = np.array([[10.0, 0.0, 1.0], [0.0, 10.0, 2.0], [-10.0, 0.0, 3.0], [0.0, -10.0, 4.0]])
    rep = radius_rmse(X, np.zeros(4, int), [Z_AXIS], 10.0)
    assert rep.overall == 0.0
    assert rep.per_pipe == [0.0]


def test_rmse_plus_minus_ten_percent():
    X = np.array([[11.0, 0.0, 0.0], [0.0, 11.0, 1.0], [9.0, 0.0, 2.0], [0.0, -9.0, 3.0]])
    rep = radius_rmse(X, np.zeros(4, int), [Z_AXIS], 10.0)
    assert rep.overall == 0.1


def test_rmse_pools_over_pipes():
    second = Cylinder(np.eye(3), np.array([100.0, 0.0, 0.0]), 10.0)
    X = np.concatenate([_ring(11.0, 10), _ring(10.0, 30) - [100.0, 0.0, 0.0]])
    lab = np.repeat([0, 1], [10, 30])
    rep = radius_rmse(X, lab, [Z_AXIS, second], 10.0)
    assert rep.per_pipe[0] == pytest.approx(0.1, abs=1e-12)
    assert rep.per_pipe[1] == pytest.approx(0.0, abs=1e-12)
    assert rep.overall == pytest.approx(math.sqrt(10 * 0.01 / 40), abs=1e-12)
    assert rep.inlier_counts == [10, 30]


def test_rmse_without_pipes_is_an_error():
    with pytest.raises(EmptyReportError):
        radius_rmse(np.zeros((3, 3)), -np.ones(3, int), [], 10.0)
    with pytest.raises(EmptyReportError):
        radius_rmse(np.zeros((3, 3)), -np.ones(3, int), [Z_AXIS], 10.0)


@settings(max_examples=60, deadline=None)
@given(w=st.lists(st.floats(-3, 3), min_size=3, max_size=3), v=st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       seed=st.integers(0, 2**32 - 1))
def test_rmse_rigid_invariance(w, v, seed):
    rng = np.random.default_rng(seed)
    X = _ring(10.0, 50) + rng.normal(0, 0.3, (50, 3))
    Q, T = so3_exp(np.array(w)), np.array(v)
    moved = Cylinder(Z_AXIS.R @ Q.T, Z_AXIS.t - Z_AXIS.R @ Q.T @ T, 10.0)
    a = radius_rmse(X, np.zeros(50, int), [Z_AXIS], 10.0).overall
    b = radius_rmse(X @ Q.T + T, np.zeros(50, int), [moved], 10.0).overall
    assert abs(a - b) < 1e-10


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0.1, 10.0), seed=st.integers(0, 2**32 - 1))
def test_rmse_scale_consistency(s, seed):
    rng = np.random.default_rng(seed)
    X = _ring(10.0, 50) + rng.normal(0, 0.3, (50, 3))
    a = radius_rmse(s * X, np.zeros(50, int), [Z_AXIS.scaled(s)], 10.0).overall
    b = radius_rmse(X, np.zeros(50, int), [Z_AXIS], 10.0 / s).overall
    assert abs(a - b) < 1e-10


# --- post-hoc fit --------------------------------------------------------------------


@pytest.fixture(scope="module")
def clean_straight():
    return simulate(load_preset("straight").with_overrides(noise=0.0))


@pytest.fixture(scope="module")
def gt(clean_straight, tmp_path_factory):
    path = tmp_path_factory.mktemp("gt") / "gt.json"
    path.write_text(json.dumps(ground_truth_json(clean_straight)))
    return load_ground_truth(path)


@pytest.fixture(scope="module")
def clean_model(clean_straight):
    return ground_truth_model(clean_straight, list(range(clean_straight.tracks.n_frames)))


def test_posthoc_fixed_point(clean_model):
    out, s = posthoc_fit_and_scale(clean_model, 1, clean_model.radius, np.random.default_rng(0))
    assert 0.99 <= s <= 1.01
    assert len(out.pipes) == 1
    assert clean_model.pipes == []


def test_posthoc_undoes_uniform_scaling(clean_model):
    m = copy_model(clean_model)
    m.apply_similarity(2.0)
    _, s = posthoc_fit_and_scale(m, 1, m.radius, np.random.default_rng(0))
    assert s == pytest.approx(0.5, rel=0.01)


def test_posthoc_partial_result_warns(clean_model):
    with pytest.warns(RuntimeWarning, match="found 1 of 3"):
        out, _ = posthoc_fit_and_scale(clean_model, 3, clean_model.radius, np.random.default_rng(0))
    assert len(out.pipes) == 1


def test_posthoc_preconditions(clean_model):
    with pytest.raises(ValueError):
        posthoc_fit_and_scale(clean_model, 0, 8.05, np.random.default_rng(0))
    tiny = copy_model(clean_model)
    tiny.has_point[np.flatnonzero(tiny.has_point)[8:]] = False
    with pytest.raises(ValueError):
        posthoc_fit_and_scale(tiny, 1, 8.05, np.random.default_rng(0))


def test_evaluate_posthoc_against_ground_truth(gt, clean_model):
    rep, scaled = evaluate(clean_model, n_pipes=1, ground_truth=gt)
    assert rep.posthoc and rep.n_pipes == 1
    assert rep.overall < 1e-3
    assert rep.axis_errors_deg[0] < 0.05
    assert rep.detector is not None
    with pytest.raises(ValueError):
        evaluate(clean_model)


def test_segment_profile_on_truth(gt, clean_model):
    prof = segment_radius_profile(clean_model, gt)
    assert len(prof) == 1
    assert prof[0][1] == pytest.approx(8.05, rel=1e-6)


def test_axis_error_of_true_axis(gt, clean_straight, clean_model):
    m = copy_model(clean_model)
    (idx, start, d, r), = clean_straight.network.straight_axes()
    R = look_rotation(d)
    pts = np.flatnonzero(m.has_point)
    m.pipes = [PipeInstance(Cylinder(R, -R @ start, r), pts, [], r)]
    assert axis_errors(m, gt)[0] < 1e-6


# --- export -------------------------------------------------------------------------


def test_json_roundtrip(tmp_path, clean_straight):
    m = ground_truth_model(clean_straight, list(range(20)), point_noise=0.1)
    (idx, start, d, r), = clean_straight.network.straight_axes()
    R = look_rotation(d)
    pts = np.flatnonzero(m.has_point)[:50]
    m.pipes = [PipeInstance(Cylinder(R, -R @ start, r), pts, [0, 1], r)]
    m.point_pipe[pts] = 0
    save_model_json(m, tmp_path / "a.json", config_hash="abc", mode="constrained")
    back = load_model_json(tmp_path / "a.json")
    assert np.array_equal(back.registered, m.registered)
    assert np.array_equal(back.has_point, m.has_point)
    ids = np.flatnonzero(m.has_point)
    assert np.array_equal(back.X[ids], m.X[ids])
    assert np.array_equal(back.R[m.registered], m.R[m.registered])
    assert back.K == m.K
    assert np.array_equal(back.pipes[0].inliers, pts)
    save_model_json(back, tmp_path / "b.json", config_hash="abc", mode="constrained")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["config_hash"] == "abc"


def _vertex_lines(path):
    lines = path.read_text().splitlines()
    n = int(next(x for x in lines if x.startswith("element vertex")).split()[-1])
    body = lines[lines.index("end_header") + 1:]
    return n, body


def test_ply_counts(tmp_path, clean_model):
    export_ply(clean_model, tmp_path / "m.ply")
    n, body = _vertex_lines(tmp_path / "m.ply")
    assert n == clean_model.n_points + int(clean_model.registered.sum()) == len(body)
    assert sum(line.endswith("255 0 0") for line in body) == clean_model.registered.sum()


def test_ply_empty_model(tmp_path, clean_straight):
    m = ReconstructionModel(clean_straight.tracks, clean_straight.scene.camera, 8.05)
    export_ply(m, tmp_path / "e.ply")
    n, body = _vertex_lines(tmp_path / "e.ply")
    assert n == 0 and body == []
    assert (tmp_path / "e.ply").read_text().startswith("ply\nformat ascii 1.0\n")


def test_format_table():
    txt = format_table({"constrained": {"A": 0.0123, "B": None}, "unconstrained": {"A": 0.25, "B": 0.5}})
    lines = txt.splitlines()
    assert lines[0].split() == ["Method", "A", "B"]
    assert lines[2].split() == ["constrained", "0.0123", "-"]
    assert lines[3].split() == ["unconstrained", "0.2500", "0.5000"]
    assert len(lines) == 4


def test_model_json_is_plain_data(clean_model):
    # must serialise without custom encoders
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        json.dumps(model_to_json(clean_model))
