"""Incremental reconstruction: initialize, register, triangulate, adjust, detect pipes."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ba import BAOptions, global_ba, local_ba, reprojection_residual
from .camera import CameraIntrinsics, unproject
from .conic import DetectionConfig, detect_pipes, extend_pipes
from .model import ReconstructionModel, RegistrationResult
from .pnp import RegistrationError, pnp_ransac
from .sim import TrackSet
from .twoview import DegeneratePairError, refine_points, relative_pose, triangulate_midpoint

log = logging.getLogger(__name__)


class InitializationError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Reconstruction settings. ``alpha`` is the cylinder weight; ``ba.alpha`` is ignored here."""

    radius: float = 8.05
    alpha: float = 10.0
    constrained: bool = True
    detect_interval: int = 30
    window: int = 50
    global_ba_growth: float = 5.0  # percent
    local_window: int = 5
    seed: int = 0
    init_pairs: int = 10
    init_threshold: float = 0.002  # rad
    init_min_parallax_deg: float = 1.0
    pnp_threshold: float = 0.002  # rad
    pnp_min_inliers: int = 12
    pnp_hypotheses: int = 200
    min_triangulation_angle_deg: float = 0.5
    max_reprojection_px: float = 3.0
    local_iterations: int = 10
    global_iterations: int = 20
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    ba: BAOptions = field(default_factory=BAOptions)
    check_consistency: bool = True
    # when unlocked intrinsics are optimized: "local+global", "global" or "never"
    refine_intrinsics: str = "global"

    @property
    def cylinder_active(self) -> bool:
        return self.constrained and self.alpha > 0

    def validate(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("detect_interval", "window", "local_window", "init_pairs", "pnp_min_inliers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.global_ba_growth < 0:
            raise ValueError("global_ba_growth must be non-negative")
        if self.refine_intrinsics not in ("local+global", "global", "never"):
            raise ValueError(f"unknown refine_intrinsics policy {self.refine_intrinsics!r}")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        d = dict(d)
        det = DetectionConfig(**d.pop("detection", {}))
        ba = BAOptions(**d.pop("ba", {}))
        return cls(detection=det, ba=ba, **d).validate()

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunLog:
    events: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def add(self, kind, **kw):
        rec = {"event": kind, **kw}
        self.events.append(rec)
        log.debug("%s", rec)


def _world_rays(model, obs):
    """Unit viewing rays in world coordinates and camera centres for observations."""
    f = model.obs_frame[obs]
    rays = unproject(model.K, model.obs_uv[obs], strict=False)
    R = model.R[f]
    centers = -np.einsum("nji,nj->ni", R, model.t[f])
    dirs = np.einsum("nji,nj->ni", R, rays)
    return centers, dirs, np.all(np.isfinite(rays), axis=1)


def initialize_model(tracks: TrackSet, K: CameraIntrinsics, config: RunConfig | None = None, rng=None):
    """Two-view start: the first usable pair (0, j), unit baseline, frame 0 at the origin."""
    cfg = config or RunConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if tracks.n_frames < 2 or len(tracks.obs_frame) == 0:
        raise InitializationError("track set has fewer than two non-empty frames")
    model = ReconstructionModel(tracks, K, cfg.radius)
    reasons = []
    a = 0
    for b in range(1, min(tracks.n_frames, cfg.init_pairs + 1)):
        try:
            _init_pair(model, a, b, cfg, rng)
            return model
        except (DegeneratePairError, ValueError) as e:
            reasons.append(f"({a},{b}): {e}")
            model = ReconstructionModel(tracks, K, cfg.radius)
    raise InitializationError("no usable initial pair; " + "; ".join(reasons))


def _init_pair(model, a, b, cfg, rng):
    oa, ob = model.frame_obs(a), model.frame_obs(b)
    ta, tb = model.obs_track[oa], model.obs_track[ob]
    common, ia, ib = np.intersect1d(ta, tb, return_indices=True)
    if len(common) < 8:
        raise ValueError(f"only {len(common)} shared tracks (need 8)")
    fa = unproject(model.K, model.obs_uv[oa[ia]], strict=False)
    fb = unproject(model.K, model.obs_uv[ob[ib]], strict=False)
    good = np.all(np.isfinite(fa), 1) & np.all(np.isfinite(fb), 1)
    common, ia, ib, fa, fb = common[good], ia[good], ib[good], fa[good], fb[good]
    R, t, inl = relative_pose(fa, fb, rng, cfg.init_threshold, min_parallax=np.radians(cfg.init_min_parallax_deg))
    model.R[b], model.t[b] = R, t / np.linalg.norm(t)
    model.registered[[a, b]] = True
    model.init_pair = (a, b)
    model.registration_order = [a, b]
    n = _triangulate_tracks(model, common[inl], cfg)
    if n < 8:
        raise ValueError(f"only {n} points survived two-view triangulation")
    return n


def _triangulate_tracks(model, tids, cfg):
    """Triangulate the given tracks from their registered observations; returns count."""
    tids = np.asarray(tids, dtype=np.int64)
    tids = tids[~model.has_point[tids]]
    if len(tids) == 0:
        return 0
    obs = model.track_obs(tids)
    obs = obs[model.registered[model.obs_frame[obs]]]
    if len(obs) == 0:
        return 0
    centers, dirs, finite = _world_rays(model, obs)
    obs, centers, dirs = obs[finite], centers[finite], dirs[finite]
    tr = model.obs_track[obs]
    uniq, group, counts = np.unique(tr, return_inverse=True, return_counts=True)
    X = triangulate_midpoint(centers, dirs, group, len(uniq))
    f = model.obs_frame[obs]
    X, res = refine_points(model.K, X, group, model.R[f], model.t[f], model.obs_uv[obs])
    err = np.linalg.norm(res, axis=1)
    pc_z = np.einsum("nj,nj->n", model.R[f][:, 2], X[group]) + model.t[f][:, 2]
    good_obs = (err <= cfg.max_reprojection_px) & (pc_z > 0)
    n_good = np.bincount(group, weights=good_obs, minlength=len(uniq))
    # parallax: angle between rays from the extreme good views
    v = X[group] - centers
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    angle = np.zeros(len(uniq))
    order = np.lexsort((f, group))
    g_sorted = group[order]
    good_sorted = good_obs[order]
    sel = order[good_sorted]
    gs = g_sorted[good_sorted]
    if len(sel):
        first = np.searchsorted(gs, np.arange(len(uniq)), side="left")
        last = np.searchsorted(gs, np.arange(len(uniq)), side="right") - 1
        has = last >= first
        i0, i1 = sel[first[has]], sel[last[has]]
        angle[has] = np.arccos(np.clip(np.einsum("ni,ni->n", v[i0], v[i1]), -1.0, 1.0))
    ok = (n_good >= 2) & (angle >= np.radians(cfg.min_triangulation_angle_deg)) & np.all(np.isfinite(X), 1)
    accepted = uniq[ok]
    model.X[accepted] = X[ok]
    model.has_point[accepted] = True
    model.obs_valid[obs[good_obs & ok[group]]] = True
    return int(ok.sum())


def register_frame(model, f, config: RunConfig | None = None, rng=None) -> RegistrationResult:
    """Absolute pose of frame ``f`` from its tracks that already have 3D points."""
    cfg = config or RunConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    obs = model.frame_obs(f)
    tr = model.obs_track[obs]
    sel = model.has_point[tr]
    obs, tr = obs[sel], tr[sel]
    if len(obs) < 4:
        raise RegistrationError(f"frame {f}: only {len(obs)} 2D-3D correspondences (need 4)")
    R, t, inl = pnp_ransac(
        model.K, model.X[tr], model.obs_uv[obs], rng,
        threshold=cfg.pnp_threshold, min_inliers=cfg.pnp_min_inliers, n_hypotheses=cfg.pnp_hypotheses,
        loss_scale=cfg.ba.reprojection_scale,
    )
    model.R[f], model.t[f] = R, t
    model.registered[f] = True
    model.obs_valid[obs[inl]] = True
    model.registration_order.append(int(f))
    return RegistrationResult(int(f), R, t, obs[inl], len(obs))


def triangulate_new(model, f, config: RunConfig | None = None) -> int:
    """Create points for tracks seen in ``f`` that lack one; returns the number added."""
    cfg = config or RunConfig()
    if not model.registered[f]:
        raise ValueError(f"frame {f} is not registered")
    tr = model.obs_track[model.frame_obs(f)]
    return _triangulate_tracks(model, tr[~model.has_point[tr]], cfg)


def filter_observations(model, frames, max_px):
    """Invalidate observations in ``frames`` reprojecting worse than ``max_px``; drop orphaned points."""
    obs = np.concatenate([model.frame_obs(f) for f in frames]) if len(frames) else np.zeros(0, np.int64)
    obs = obs[model.obs_valid[obs]]
    if len(obs) == 0:
        return 0
    f = model.obs_frame[obs]
    tr = model.obs_track[obs]
    r = reprojection_residual(model.K, model.R[f], model.t[f], model.X[tr], model.obs_uv[obs])
    bad = obs[np.linalg.norm(r, axis=1) > max_px]
    model.obs_valid[bad] = False
    touched = np.unique(model.obs_track[bad])
    if len(touched) == 0:
        return 0
    o = model.track_obs(touched)
    cnt = np.bincount(model.obs_track[o[model.obs_valid[o]]], minlength=len(model.has_point))[touched]
    model.remove_points(touched[cnt < 2])
    return len(bad)


def _rescale_to_radius(model, pipe):
    """Gauge choice at the first detection: mean inlier axis distance equals r."""
    d = pipe.shape.axis_distance(model.X[pipe.inliers])
    s = pipe.radius / float(np.mean(d))
    model.apply_similarity(s)
    return s


class Pipeline:
    """Stateful driver for one reconstruction; ``run()`` returns the model."""

    def __init__(self, tracks: TrackSet, K: CameraIntrinsics, config: RunConfig | None = None):
        self.cfg = (config or RunConfig()).validate()
        self.tracks = tracks.truncated(self.cfg.window)
        self.K0 = K
        self.rng = np.random.default_rng(self.cfg.seed)
        self.log = RunLog()
        self.model = None
        self.ba_reports = []

    def _local_opts(self):
        o = self.cfg.ba
        return BAOptions(
            alpha=self.cfg.alpha if self.cfg.cylinder_active else 0.0,
            reprojection_scale=o.reprojection_scale, cylinder_scale=o.cylinder_scale,
            max_iterations=self.cfg.local_iterations, function_tolerance=o.function_tolerance,
            gradient_tolerance=o.gradient_tolerance,
        )

    def _global_opts(self):
        o = self._local_opts()
        o.max_iterations = self.cfg.global_iterations
        return o

    def _global(self, reason):
        free_K = self.model.intrinsics_free and self.cfg.refine_intrinsics != "never"
        res = global_ba(self.model, self._global_opts(), free_intrinsics=free_K)
        self.points_at_global = self.model.n_points
        self.ba_reports.append({"kind": "global", "reason": reason, **res.report.to_json()})
        self.log.add("global_ba", reason=reason, cost=res.report.final_cost, iterations=res.report.iterations)
        filter_observations(self.model, np.flatnonzero(self.model.registered), self.cfg.max_reprojection_px)

    def _detect(self, recent):
        m = self.model
        cfg = self.cfg
        grown = extend_pipes(m, recent, cfg.detection) if m.pipes else []
        try:
            new = detect_pipes(m, recent, self.rng, cfg.detection, radius=cfg.radius,
                               expected_radius=cfg.radius if m.pipes else None)
        except ValueError:
            new = []
        if new:
            if len(m.pipes) == len(new):
                s = _rescale_to_radius(m, new[0])
                self.log.add("rescale", factor=s)
                m.intrinsics_free = True
            self.log.add("pipes", new=len(new), total=len(m.pipes), grown=len(grown))
        return bool(new)

    def _try_register(self, f):
        try:
            register_frame(self.model, f, self.cfg, self.rng)
        except RegistrationError as e:
            self.log.add("skip", frame=int(f), reason=str(e))
            return False
        n = triangulate_new(self.model, f, self.cfg)
        win = self.model.registration_order[-self.cfg.local_window:]
        free_K = self.model.intrinsics_free and self.cfg.refine_intrinsics == "local+global"
        res = local_ba(self.model, win, self._local_opts(), free_intrinsics=free_K)
        self.ba_reports.append({"kind": "local", "frame": int(f), **res.report.to_json()})
        filter_observations(self.model, win, self.cfg.max_reprojection_px)
        self.log.add("register", frame=int(f), new_points=n, points=self.model.n_points)
        return True

    def run(self) -> ReconstructionModel:
        cfg = self.cfg
        self.model = m = initialize_model(self.tracks, self.K0, cfg, self.rng)
        self.log.add("init", pair=list(m.init_pair), points=m.n_points)
        self._global("init")
        since_detect = 0
        pending = []
        for f in range(m.n_frames):
            if m.registered[f]:
                continue
            ok = self._try_register(f)
            if not ok:
                pending.append(f)
                self.log.skipped.append(int(f))
                continue
            for g in pending:
                if not self._try_register(g):
                    self.log.dropped.append(int(g))
            pending = []
            since_detect += 1
            new_pipe = False
            if cfg.cylinder_active and since_detect >= cfg.detect_interval:
                since_detect = 0
                recent = m.registration_order[-cfg.detect_interval:]
                new_pipe = self._detect(recent)
            if new_pipe:
                self._global("new_pipe")
            elif m.n_points >= (1.0 + cfg.global_ba_growth / 100.0) * self.points_at_global:
                self._global("growth")
            if cfg.check_consistency:
                m.check()
        self.log.dropped.extend(int(g) for g in pending)
        if cfg.cylinder_active:
            self._detect(m.registration_order[-cfg.detect_interval:])
        self._global("final")
        if cfg.check_consistency:
            m.check()
        return m


def run_pipeline(tracks: TrackSet, K: CameraIntrinsics, config: RunConfig | None = None):
    """Reconstruct from tracks; returns ``(model, pipeline)`` (the latter carries logs)."""
    p = Pipeline(tracks, K, config)
    model = p.run()
    return model, p
