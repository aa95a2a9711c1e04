import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pipesfm.camera import project
from pipesfm.sim import (
    NetworkSpecError,
    ObservationSpec,
    Part,
    PipeNetworkSpec,
    TrackSet,
    TrajectoryError,
    TrajectorySpec,
    build_network,
    generate_trajectory,
    load_preset,
    perturb_intrinsics,
    sample_observations,
    simulate,
)


def _axis_distance(X, start, direction):
    d = np.asarray(direction) / np.linalg.norm(direction)
    v = X - start
    return np.linalg.norm(v - np.outer(v @ d, d), axis=1)


def _straight_points(net):
    for idx, start, direction, radius in net.straight_axes():
        yield net.points[net.point_part == idx], start, direction, radius


def test_single_straight_points_on_wall():
    net = build_network(PipeNetworkSpec([Part("straight", length=100.0)], radius=8.05))
    X = net.points
    assert len(X) > 100
    assert np.max(np.abs(np.hypot(X[:, 1], X[:, 2]) - 8.05)) < 1e-10


@settings(max_examples=15, deadline=None)
@given(
    lengths=st.lists(st.floats(20.0, 60.0), min_size=2, max_size=3),
    angles=st.lists(st.floats(20.0, 90.0), min_size=1, max_size=2),
    rolls=st.lists(st.floats(-180.0, 180.0), min_size=2, max_size=2),
    seed=st.integers(0, 2**16),
)
def test_straight_wall_points_at_radius(lengths, angles, rolls, seed):
    parts = []
    for i, L in enumerate(lengths):
        parts.append(Part("straight", length=L))
        if i < len(angles) and i + 1 < len(lengths):
            parts.append(Part("elbow", angle_deg=angles[i], roll_deg=rolls[i]))
    net = build_network(PipeNetworkSpec(parts, radius=5.0, density=0.05), seed=seed)
    for X, start, direction, radius in _straight_points(net):
        assert np.max(np.abs(_axis_distance(X, start, direction) - radius)) < 1e-10


def test_network_a_straights_share_one_axis():
    net = build_network(load_preset("network-a").network)
    axes = net.straight_axes()
    assert len(axes) == 3
    d0 = axes[0][2]
    for _, start, d, _ in axes[1:]:
        assert abs(abs(d @ d0) - 1.0) < 1e-12
        assert np.linalg.norm(np.cross(start - axes[0][1], d0)) < 1e-9


def test_elbow_turns_tangent_by_its_angle():
    net = build_network(PipeNetworkSpec([Part("straight", length=30.0), Part("elbow", angle_deg=90.0),
                                         Part("straight", length=30.0)], radius=4.0))
    elbow = net.parts[1]
    _, f0 = elbow.centerline(0.0)
    _, f1 = elbow.centerline(elbow.length)
    assert math.degrees(math.acos(np.clip(f0[:, 0] @ f1[:, 0], -1, 1))) == pytest.approx(90.0, abs=1e-9)
    # arc length of a quarter bend at the default 3r bend radius
    assert elbow.length == pytest.approx(0.5 * math.pi * 12.0, rel=1e-12)


def test_bad_parts_rejected():
    with pytest.raises(NetworkSpecError):
        build_network(PipeNetworkSpec([Part("straight", length=-1.0)], radius=4.0))
    with pytest.raises(NetworkSpecError):
        build_network(PipeNetworkSpec([Part("elbow", angle_deg=120.0)], radius=4.0))
    with pytest.raises(NetworkSpecError):
        build_network(PipeNetworkSpec([Part("valve", length=3.0)], radius=4.0))


def test_self_intersection_detected():
    parts = [Part("straight", length=40.0)]
    parts += [Part("elbow", angle_deg=90.0, bend_radius=9.0), Part("straight", length=1.0)] * 4
    with pytest.raises(NetworkSpecError):
        build_network(PipeNetworkSpec(parts, radius=4.0))


def test_centered_camera_stays_on_axis():
    net = build_network(load_preset("network-a").network)
    poses = generate_trajectory(net, TrajectorySpec(speed=2.0, centering=True, wobble_deg=0.0))
    centers = np.array([-R.T @ t for R, t in poses])
    _, start, d, _ = net.straight_axes()[0]
    assert np.max(_axis_distance(centers, start, d)) < 1e-9


def test_trajectory_is_deterministic():
    net = build_network(load_preset("network-b").network)
    spec = TrajectorySpec(speed=1.5, centering=False, wobble_mm=0.5, wobble_deg=2.0, seed=7)
    a = generate_trajectory(net, spec)
    b = generate_trajectory(net, spec)
    assert all(np.array_equal(R1, R2) and np.array_equal(t1, t2) for (R1, t1), (R2, t2) in zip(a, b))


def test_travel_distance():
    net = build_network(PipeNetworkSpec([Part("straight", length=120.0)], radius=8.05))
    poses = generate_trajectory(net, TrajectorySpec(speed=0.5, n_frames=201, start_offset=10.0))
    c0, c1 = (-R.T @ t for R, t in (poses[0], poses[-1]))
    assert np.linalg.norm(c1 - c0) == pytest.approx(100.0, abs=1e-9)


def test_trajectory_past_end_rejected():
    net = build_network(PipeNetworkSpec([Part("straight", length=50.0)], radius=8.05))
    with pytest.raises(TrajectoryError):
        generate_trajectory(net, TrajectorySpec(speed=1.0, n_frames=100))


@pytest.fixture(scope="module")
def small_scene():
    return load_preset("straight")


def _simulate(scene, **obs):
    net = build_network(scene.network, seed=scene.seed)
    poses = generate_trajectory(net, scene.trajectory)
    spec = ObservationSpec(**{**scene.observation.__dict__, **obs})
    return net, poses, sample_observations(net, poses, scene.camera, spec)


def test_noiseless_observations_are_exact(small_scene):
    _, poses, tr = _simulate(small_scene, sigma_px=0.0)
    R = np.stack([poses[f][0] for f in tr.obs_frame])
    t = np.stack([poses[f][1] for f in tr.obs_frame])
    X = tr.track_point[tr.obs_track]
    uv = project(small_scene.camera, np.einsum("nij,nj->ni", R, X) + t)
    assert np.array_equal(uv, tr.obs_uv)


def _spans(tr):
    lo = np.full(tr.n_tracks, 10**9)
    hi = np.full(tr.n_tracks, -1)
    np.minimum.at(lo, tr.obs_track, tr.obs_frame)
    np.maximum.at(hi, tr.obs_track, tr.obs_frame)
    return hi - lo + 1


def test_window_two_limits_track_span(small_scene):
    _, _, tr = _simulate(small_scene, window=2)
    assert _spans(tr).max() <= 2


def test_noise_level(small_scene):
    _, poses, clean = _simulate(small_scene, sigma_px=0.0)
    _, _, noisy = _simulate(small_scene, sigma_px=0.5)
    assert np.array_equal(clean.obs_track, noisy.obs_track)
    res = (noisy.obs_uv - clean.obs_uv)[:5000].reshape(-1)
    assert len(res) == 10000
    assert 0.45 <= np.std(res) <= 0.55


@settings(max_examples=40, deadline=None)
@given(window=st.integers(2, 12), seed=st.integers(0, 1000))
def test_truncated_respects_window(window, seed):
    rng = np.random.default_rng(seed)
    n_tracks, n_frames = 30, 40
    first = rng.integers(0, n_frames - 1, n_tracks)
    length = rng.integers(2, 25, n_tracks)
    rows = [(f, j) for j in range(n_tracks) for f in range(first[j], min(n_frames, first[j] + length[j]))]
    rows.sort()
    fr, tk = (np.array(x) for x in zip(*rows))
    tr = TrackSet(n_frames, fr, tk, rng.normal(size=(len(fr), 2)))
    cut = tr.truncated(window)
    assert _spans(cut).max() <= window
    # the first `window` frames of every track survive
    assert np.array_equal(np.minimum(_spans(tr), window), _spans(cut))


def test_jsonl_roundtrip(tmp_path, small_scene):
    _, _, tr = _simulate(small_scene)
    tr.write_jsonl(tmp_path / "scene.jsonl")
    back = TrackSet.read_jsonl(tmp_path / "scene.jsonl")
    assert back.n_frames == tr.n_frames
    assert np.array_equal(back.obs_frame, tr.obs_frame)
    assert np.array_equal(back.obs_track, tr.obs_track)
    assert np.array_equal(back.obs_uv, tr.obs_uv)


def test_perturb_zero_is_identity():
    K = load_preset("network-a").camera
    assert perturb_intrinsics(K, {k: 0.0 for k in K.to_json()}) == K


def test_perturb_k1_only():
    K = load_preset("network-a").camera
    P = perturb_intrinsics(K, k1=0.02)
    diff = [k for k in K.to_json() if K.to_json()[k] != P.to_json()[k]]
    assert diff == ["k1"]
    assert P.k1 == pytest.approx(K.k1 * 1.02, rel=1e-15)


def test_presets_topology():
    counts = {}
    for name in ("network-a", "network-b", "network-c", "network-d"):
        s = load_preset(name)
        counts[name] = sum(p.kind == "straight" for p in s.network.parts)
    assert counts["network-a"] == 3
    assert counts["network-d"] == 7
    assert load_preset("network-a").network.radius == pytest.approx(16.1 / 2)
    assert load_preset("network-b").network.radius == pytest.approx(8.0 / 2)


def test_simulate_is_deterministic(small_scene):
    a = simulate(small_scene).tracks
    b = simulate(small_scene).tracks
    assert np.array_equal(a.obs_uv, b.obs_uv) and np.array_equal(a.obs_track, b.obs_track)
