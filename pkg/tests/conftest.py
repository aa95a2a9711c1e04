import numpy as np
import pytest

from pipesfm.model import ReconstructionModel
from pipesfm.sim import load_preset, simulate


def ground_truth_model(sim, frames, point_noise=0.0, seed=0):
    """A reconstruction holding the true poses and points seen by ``frames``."""
    tr = sim.tracks
    m = ReconstructionModel(tr, sim.scene.camera, sim.scene.network.radius)
    frames = np.asarray(frames)
    for f in frames:
        m.R[f], m.t[f] = sim.poses[f]
    m.registered[frames] = True
    in_frames = m.registered[tr.obs_frame]
    counts = np.bincount(tr.obs_track[in_frames], minlength=tr.n_tracks)
    m.has_point = counts >= 2
    m.obs_valid = in_frames & m.has_point[tr.obs_track]
    rng = np.random.default_rng(seed)
    m.X = tr.track_point + rng.normal(0.0, point_noise, tr.track_point.shape) if point_noise else tr.track_point.copy()
    m.registration_order = [int(f) for f in frames]
    m.init_pair = (int(frames[0]), int(frames[1]))
    return m


@pytest.fixture(scope="session")
def network_a_sim():
    return simulate(load_preset("network-a"))


@pytest.fixture(scope="session")
def straight_sim():
    return simulate(load_preset("straight"))
