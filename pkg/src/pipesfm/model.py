"""The growing reconstruction: poses, scene points, observations, pipes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics
from .sim import TrackSet


@dataclass
class PipeInstance:
    """A detected straight pipe.

    ``shape`` is a :class:`~pipesfm.conic.Cone` or, when the fit degenerates,
    a :class:`~pipesfm.conic.Cylinder`; both expose the axis frame ``R, t``.
    """

    shape: object
    inliers: np.ndarray
    frames: list
    radius: float
    active: bool = True

    @property
    def R(self):
        return self.shape.R

    @property
    def t(self):
        return self.shape.t


class ConsistencyError(AssertionError):
    pass


class ReconstructionModel:
    def __init__(self, tracks: TrackSet, K: CameraIntrinsics, radius: float):
        F, T = tracks.n_frames, tracks.n_tracks
        self.tracks = tracks
        self.K = K
        self.radius = float(radius)
        self.R = np.tile(np.eye(3), (F, 1, 1))
        self.t = np.zeros((F, 3))
        self.registered = np.zeros(F, dtype=bool)
        self.X = np.zeros((T, 3))
        self.has_point = np.zeros(T, dtype=bool)
        self.point_pipe = np.full(T, -1, dtype=np.int64)
        self.obs_frame = tracks.obs_frame
        self.obs_track = tracks.obs_track
        self.obs_uv = tracks.obs_uv
        self.obs_valid = np.zeros(len(self.obs_frame), dtype=bool)
        self.frame_offsets = np.searchsorted(self.obs_frame, np.arange(F + 1))
        self.track_order = np.argsort(self.obs_track, kind="stable")
        self.track_offsets = np.searchsorted(self.obs_track[self.track_order], np.arange(T + 1))
        self.pipes: list[PipeInstance] = []
        self.frame_labels = [set() for _ in range(F)]
        self.intrinsics_free = False
        self.init_pair: tuple | None = None
        self.registration_order: list[int] = []

    @property
    def n_frames(self):
        return len(self.registered)

    @property
    def anchor(self):
        """The frame fixed at the world origin (first frame of the initial pair)."""
        return 0 if self.init_pair is None else int(self.init_pair[0])

    @property
    def n_points(self):
        return int(self.has_point.sum())

    def frame_obs(self, f):
        return np.arange(self.frame_offsets[f], self.frame_offsets[f + 1])

    def track_obs(self, tids):
        """Observation indices of the given tracks, concatenated."""
        tids = np.atleast_1d(np.asarray(tids, dtype=np.int64))
        lo, hi = self.track_offsets[tids], self.track_offsets[tids + 1]
        n = hi - lo
        if n.sum() == 0:
            return np.zeros(0, dtype=np.int64)
        starts = np.repeat(lo - np.concatenate([[0], np.cumsum(n)[:-1]]), n)
        return self.track_order[starts + np.arange(n.sum())]

    def camera_centers(self, frames=None):
        frames = np.flatnonzero(self.registered) if frames is None else np.asarray(frames)
        return -np.einsum("fji,fj->fi", self.R[frames], self.t[frames])

    def points_seen_by(self, frames):
        """Point ids with a valid observation in any of ``frames``."""
        idx = np.concatenate([self.frame_obs(f) for f in frames]) if len(frames) else np.zeros(0, int)
        idx = idx[self.obs_valid[idx]]
        return np.unique(self.obs_track[idx])

    def remove_points(self, pids):
        pids = np.atleast_1d(pids)
        if len(pids) == 0:
            return
        self.has_point[pids] = False
        self.obs_valid[self.track_obs(pids)] = False
        for i in np.unique(self.point_pipe[pids]):
            if i >= 0:
                pipe = self.pipes[i]
                pipe.inliers = np.setdiff1d(pipe.inliers, pids)
        self.point_pipe[pids] = -1

    def apply_similarity(self, s):
        """Scale the whole model about the world origin (frame 0 stays fixed)."""
        self.X *= s
        self.t *= s
        for p in self.pipes:
            p.shape = p.shape.scaled(s)

    def check(self):
        """Raise ConsistencyError when cross references dangle."""
        v = np.flatnonzero(self.obs_valid)
        if not np.all(self.registered[self.obs_frame[v]]):
            raise ConsistencyError("valid observation in an unregistered frame")
        if not np.all(self.has_point[self.obs_track[v]]):
            raise ConsistencyError("valid observation of a missing point")
        counts = np.bincount(self.obs_track[v], minlength=len(self.has_point))
        if np.any(counts[self.has_point] < 2):
            raise ConsistencyError("scene point observed by fewer than two registered frames")
        seen = np.zeros(len(self.has_point), dtype=bool)
        for i, p in enumerate(self.pipes):
            if len(p.inliers) and not np.all(self.has_point[p.inliers]):
                raise ConsistencyError(f"pipe {i} references a missing point")
            if np.any(seen[p.inliers]):
                raise ConsistencyError(f"pipe {i} shares points with another pipe")
            seen[p.inliers] = True
            if not np.all(self.point_pipe[p.inliers] == i):
                raise ConsistencyError(f"pipe {i} inliers disagree with point labels")
            if any(not self.registered[f] for f in p.frames):
                raise ConsistencyError(f"pipe {i} labels an unregistered frame")
        labelled = self.point_pipe >= 0
        if np.any(labelled & ~seen):
            raise ConsistencyError("point labelled with a pipe that does not list it")
        return True


@dataclass
class RegistrationResult:
    frame: int
    R: np.ndarray
    t: np.ndarray
    inliers: np.ndarray
    n_correspondences: int
    extra: dict = field(default_factory=dict)
