"""Synthetic pipe networks, endoscope trajectories and feature tracks.

Scene unit is the millimetre. A network is a chain of parts (straight
tubes, elbows and tees); each part starts where the previous one ended and
inherits its centerline frame. Surface points are sampled uniformly on the
tube walls, and a camera moving inside the network observes them through
the fisheye model.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, project
from .geometry import so3_exp

KINDS = ("straight", "elbow", "tee")


class NetworkSpecError(ValueError):
    def __init__(self, index, message):
        super().__init__(f"part {index}: {message}")
        self.index = index


class TrajectoryError(ValueError):
    def __init__(self, frame, message):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


@dataclass
class Part:
    kind: str
    length: float = 0.0
    radius: float | None = None
    angle_deg: float = 0.0
    bend_radius: float | None = None
    roll_deg: float = 0.0
    branch_length: float = 0.0
    branch_roll_deg: float = 90.0


@dataclass
class PipeNetworkSpec:
    parts: list
    radius: float
    density: float = 0.15
    name: str = "network"

    @classmethod
    def from_json(cls, d: dict) -> "PipeNetworkSpec":
        parts = [Part(**p) for p in d["parts"]]
        return cls(parts=parts, radius=float(d["radius"]), density=float(d.get("density", 0.15)), name=d.get("name", "network"))

    def to_json(self) -> dict:
        return {"name": self.name, "radius": self.radius, "density": self.density, "parts": [asdict(p) for p in self.parts]}


@dataclass
class TrajectorySpec:
    speed: float = 1.0
    n_frames: int | None = None
    wobble_mm: float = 0.0
    wobble_deg: float = 0.0
    centering: bool = True
    seed: int = 0
    start_offset: float = 20.0
    end_offset: float = 2.0
    look: str = "backward"
    margin: float = 0.1  # fraction of the radius kept clear of the wall


@dataclass
class ObservationSpec:
    sigma_px: float = 0.5
    window: int = 50
    max_depth: float = 50.0
    fov_deg: float = 120.0
    width: int = 1024
    height: int = 768
    seed: int = 0


# --- geometry of individual parts ---------------------------------------------


class _PartGeom:
    def __init__(self, index, part: Part, start, frame, default_radius):
        self.index = index
        self.kind = part.kind
        self.part = part
        self.start = np.asarray(start, float)
        self.frame = np.asarray(frame, float)  # columns: tangent, normal, binormal
        self.radius = float(part.radius if part.radius is not None else default_radius)
        if self.radius <= 0:
            raise NetworkSpecError(index, f"radius must be positive, got {self.radius}")
        T, N, B = self.frame.T
        if part.kind in ("straight", "tee"):
            if not part.length > 0:
                raise NetworkSpecError(index, f"{part.kind} length must be positive, got {part.length}")
            self.length = float(part.length)
        elif part.kind == "elbow":
            if not 0.0 < part.angle_deg <= 90.0:
                raise NetworkSpecError(index, f"elbow angle must lie in (0, 90] deg, got {part.angle_deg}")
            self.bend_radius = float(part.bend_radius if part.bend_radius is not None else 3.0 * self.radius)
            if self.bend_radius <= self.radius:
                raise NetworkSpecError(index, "elbow bend radius must exceed the tube radius")
            self.angle = math.radians(part.angle_deg)
            roll = math.radians(part.roll_deg)
            self.bend_dir = math.cos(roll) * N + math.sin(roll) * B
            self.bend_axis = np.cross(T, self.bend_dir)
            self.center = self.start + self.bend_radius * self.bend_dir
            self.length = self.bend_radius * self.angle
        else:
            raise NetworkSpecError(index, f"unknown part kind {part.kind!r}")
        if part.kind == "tee":
            if part.branch_length <= 0:
                raise NetworkSpecError(index, "tee branch stub length must be positive")
            broll = math.radians(part.branch_roll_deg)
            self.branch_dir = math.cos(broll) * N + math.sin(broll) * B
            self.branch_origin = self.start + 0.5 * self.length * T
            self.branch_radius = min(self.radius, 0.8 * self.radius)
            self.branch_end = self.radius + part.branch_length

    def centerline(self, s):
        """Position and frame at arc length ``s`` (0..length) within the part."""
        T = self.frame[:, 0]
        if self.kind == "elbow":
            a = s / self.bend_radius
            Rot = so3_exp(self.bend_axis * a)
            pos = self.center + Rot @ (self.start - self.center)
            return pos, Rot @ self.frame
        return self.start + s * T, self.frame

    def end(self):
        return self.centerline(self.length)

    @property
    def is_straight(self):
        return self.kind == "straight"

    def sample(self, rng, density):
        r = self.radius
        T, N, B = self.frame.T
        if self.kind == "straight":
            n = int(round(density * 2 * math.pi * r * self.length))
            s = rng.uniform(0.0, self.length, n)
            psi = rng.uniform(0.0, 2 * math.pi, n)
            return self.start + s[:, None] * T + r * (np.cos(psi)[:, None] * N + np.sin(psi)[:, None] * B)
        if self.kind == "elbow":
            Rb = self.bend_radius
            n_try = int(round(density * 2 * math.pi * r * self.length * (Rb + r) / Rb))
            a = rng.uniform(0.0, self.angle, n_try)
            psi = rng.uniform(0.0, 2 * math.pi, n_try)
            keep = rng.uniform(0.0, 1.0, n_try) < (Rb - r * np.cos(psi)) / (Rb + r)
            a, psi = a[keep], psi[keep]
            Rot = so3_exp(self.bend_axis[None, :] * a[:, None])
            inward = Rot @ self.bend_dir
            base = self.center[None, :] - Rb * inward
            return base + r * (np.cos(psi)[:, None] * inward + np.sin(psi)[:, None] * self.bend_axis)
        # tee: main bore without the branch opening, the two shoulders, the branch stub and its cap
        n = int(round(density * 2 * math.pi * r * self.length))
        s = rng.uniform(0.0, self.length, n)
        psi = rng.uniform(0.0, 2 * math.pi, n)
        main = self.start + s[:, None] * T + r * (np.cos(psi)[:, None] * N + np.sin(psi)[:, None] * B)
        main = main[self._branch_radial(main) >= self.branch_radius]
        parts = [main]
        rb = self.branch_radius
        bu = np.cross(self.branch_dir, T)
        nb = int(round(density * 2 * math.pi * rb * self.branch_end))
        h = rng.uniform(0.0, self.branch_end, nb)
        psi = rng.uniform(0.0, 2 * math.pi, nb)
        br = self.branch_origin + h[:, None] * self.branch_dir + rb * (np.cos(psi)[:, None] * T + np.sin(psi)[:, None] * bu)
        parts.append(br[self._main_radial(br) >= r])
        nc = int(round(density * math.pi * rb * rb))
        rr = rb * np.sqrt(rng.uniform(0.0, 1.0, nc))
        psi = rng.uniform(0.0, 2 * math.pi, nc)
        parts.append(self.branch_origin + self.branch_end * self.branch_dir + rr[:, None] * (np.cos(psi)[:, None] * T + np.sin(psi)[:, None] * bu))
        return np.concatenate(parts)

    def shoulder(self, rng, density, inner, at_end):
        """Annular step face where a wider part meets a narrower neighbour."""
        r = self.radius
        if inner >= r:
            return np.zeros((0, 3))
        T, N, B = self.frame.T
        n = int(round(density * math.pi * (r * r - inner * inner)))
        rr = np.sqrt(rng.uniform(inner * inner, r * r, n))
        psi = rng.uniform(0.0, 2 * math.pi, n)
        pos = self.start + (self.length if at_end else 0.0) * T
        return pos + rr[:, None] * (np.cos(psi)[:, None] * N + np.sin(psi)[:, None] * B)

    def _main_radial(self, X):
        T = self.frame[:, 0]
        d = X - self.start
        return np.linalg.norm(d - (d @ T)[:, None] * T, axis=1)

    def _branch_radial(self, X):
        d = X - self.branch_origin
        return np.linalg.norm(d - (d @ self.branch_dir)[:, None] * self.branch_dir, axis=1)

    def inside(self, X, tol):
        """Whether points lie within the part's hollow interior (boundary included)."""
        r = self.radius + tol
        if self.kind == "elbow":
            v = X - self.center
            h = v @ self.bend_axis
            w = v - h[:, None] * self.bend_axis
            wn = np.linalg.norm(w, axis=1)
            T = self.frame[:, 0]
            a = np.arctan2(w @ T, -(w @ self.bend_dir))
            ok = (a >= -1e-9) & (a <= self.angle + 1e-9)
            return ok & ((wn - self.bend_radius) ** 2 + h * h <= r * r)
        T = self.frame[:, 0]
        s = (X - self.start) @ T
        ok = (s >= -tol) & (s <= self.length + tol) & (self._main_radial(X) <= r)
        if self.kind == "tee":
            hb = (X - self.branch_origin) @ self.branch_dir
            okb = (hb >= 0.0) & (hb <= self.branch_end + tol) & (self._branch_radial(X) <= self.branch_radius + tol)
            ok |= okb
        return ok


@dataclass
class Network:
    spec: PipeNetworkSpec
    parts: list
    points: np.ndarray
    point_part: np.ndarray
    arc_start: np.ndarray
    total_length: float

    def centerline(self, s):
        """Position, frame (columns T, N, B), part index at global arc length s."""
        i = int(np.clip(np.searchsorted(self.arc_start, s, side="right") - 1, 0, len(self.parts) - 1))
        p = self.parts[i]
        pos, frame = p.centerline(float(np.clip(s - self.arc_start[i], 0.0, p.length)))
        return pos, frame, i

    def inside(self, X, tol=1e-6):
        X = np.atleast_2d(X)
        ok = np.zeros(len(X), dtype=bool)
        for p in self.parts:
            ok |= p.inside(X, tol)
        return ok

    def axis_polyline(self, step=1.0):
        s = np.append(np.arange(0.0, self.total_length, step), self.total_length)
        return np.array([self.centerline(v)[0] for v in s])

    def straight_axes(self):
        """(part index, start point, unit direction, radius) for straight parts."""
        return [(p.index, p.start, p.frame[:, 0].copy(), p.radius) for p in self.parts if p.is_straight]

    def describe(self) -> list:
        out = []
        for p in self.parts:
            end, _ = p.end()
            out.append({
                "index": p.index,
                "kind": p.kind,
                "radius": p.radius,
                "start": p.start.tolist(),
                "end": end.tolist(),
                "direction": p.frame[:, 0].tolist(),
                "length": p.length,
            })
        return out


def build_network(spec: PipeNetworkSpec, density: float | None = None, seed: int = 0) -> Network:
    """Lay out the parts end to end and sample their walls."""
    if not spec.parts:
        raise NetworkSpecError(0, "a network needs at least one part")
    density = spec.density if density is None else density
    rng = np.random.default_rng(seed)
    pos = np.zeros(3)
    frame = np.eye(3)  # initial tangent +x, normal +y, binormal +z
    geoms = []
    for i, part in enumerate(spec.parts):
        if part.kind not in KINDS:
            raise NetworkSpecError(i, f"unknown part kind {part.kind!r}")
        g = _PartGeom(i, part, pos, frame, spec.radius)
        geoms.append(g)
        pos, frame = g.end()
        pos = pos.copy()
        # re-orthonormalize to keep the chain rigid after many elbows
        u, _, vt = np.linalg.svd(frame)
        frame = u @ vt
    _check_self_intersection(geoms)

    pts, labels = [], []
    for i, g in enumerate(geoms):
        block = [g.sample(rng, density)]
        if i > 0:
            block.append(g.shoulder(rng, density, geoms[i - 1].radius, at_end=False))
        if i + 1 < len(geoms):
            block.append(g.shoulder(rng, density, geoms[i + 1].radius, at_end=True))
        block = np.concatenate(block)
        pts.append(block)
        labels.append(np.full(len(block), i))
    arc = np.cumsum([0.0] + [g.length for g in geoms])
    return Network(spec, geoms, np.concatenate(pts), np.concatenate(labels), arc[:-1], float(arc[-1]))


def _check_self_intersection(geoms, step=1.0):
    """Reject tubes that come closer than their radii to a part far along the chain."""
    pos, arc, rad, idx = [], [], [], []
    offset = 0.0
    for g in geoms:
        s = np.linspace(0.0, g.length, max(2, int(g.length / step) + 1))
        pos.append(np.array([g.centerline(v)[0] for v in s]))
        arc.append(offset + s)
        rad.append(np.full(len(s), g.radius))
        idx.append(np.full(len(s), g.index))
        offset += g.length
    pos, arc, rad, idx = map(np.concatenate, (pos, arc, rad, idx))
    rmax = rad.max()
    for k in range(len(pos)):
        far = arc - arc[k] > 4.0 * rmax
        if not far.any():
            continue
        d = np.linalg.norm(pos[far] - pos[k], axis=1)
        hit = d < rad[far] + rad[k]
        if hit.any():
            j = int(idx[far][np.argmax(hit)])
            raise NetworkSpecError(j, f"tube intersects part {int(idx[k])} (centerline gap {d[hit].min():.2f} mm)")


# --- trajectory -----------------------------------------------------------------


def _smooth_noise(rng, n, dims, amplitude):
    if amplitude == 0.0:
        return np.zeros((n, dims))
    k = np.arange(n)[:, None]
    out = np.zeros((n, dims))
    for _ in range(3):
        freq = rng.uniform(0.005, 0.03, dims)
        phase = rng.uniform(0.0, 2 * math.pi, dims)
        out += np.sin(2 * math.pi * freq * k + phase)
    return amplitude * out / 3.0


def generate_trajectory(network: Network, tspec: TrajectorySpec):
    """World-to-camera poses ``(R, t)`` for a camera moving along the centerline."""
    if tspec.speed <= 0:
        raise TrajectoryError(0, "speed must be positive")
    usable = network.total_length - tspec.start_offset - tspec.end_offset
    n = tspec.n_frames if tspec.n_frames is not None else int(usable / tspec.speed) + 1
    if n < 2 or tspec.start_offset + (n - 1) * tspec.speed > network.total_length:
        raise TrajectoryError(n - 1, "trajectory runs past the end of the network")
    rng = np.random.default_rng(tspec.seed)
    lateral = _smooth_noise(rng, n, 2, 0.0 if tspec.centering else tspec.wobble_mm)
    wobble = _smooth_noise(rng, n, 3, math.radians(tspec.wobble_deg))
    sign = -1.0 if tspec.look == "backward" else 1.0
    poses = []
    for k in range(n):
        s = tspec.start_offset + k * tspec.speed
        pos, frame, i = network.centerline(s)
        T, N, B = frame.T
        radius = network.parts[i].radius
        off = lateral[k, 0] * N + lateral[k, 1] * B
        clearance = radius * (1.0 - tspec.margin)
        if np.linalg.norm(off) >= clearance:
            raise TrajectoryError(k, f"camera leaves the tube (offset {np.linalg.norm(off):.3f} mm, clearance {clearance:.3f} mm)")
        C = pos + off
        z = sign * T
        R = np.stack([N, np.cross(z, N), z])
        R = so3_exp(wobble[k]) @ R
        poses.append((R, -R @ C))
    return poses


# --- observations ---------------------------------------------------------------


@dataclass
class TrackSet:
    """Flat observation table sorted by frame; track ids are 0..n_tracks-1."""

    n_frames: int
    obs_frame: np.ndarray
    obs_track: np.ndarray
    obs_uv: np.ndarray
    track_point: np.ndarray | None = None  # ground truth, evaluation only
    track_part: np.ndarray | None = None
    empty_frames: list = field(default_factory=list)

    @property
    def n_tracks(self) -> int:
        if self.track_point is not None:
            return len(self.track_point)
        return int(self.obs_track.max()) + 1 if len(self.obs_track) else 0

    def frame_slice(self, f):
        lo, hi = np.searchsorted(self.obs_frame, [f, f + 1])
        return slice(int(lo), int(hi))

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for f in range(self.n_frames):
                sl = self.frame_slice(f)
                obs = [[int(t), float(u), float(v)] for t, (u, v) in zip(self.obs_track[sl], self.obs_uv[sl])]
                fh.write(json.dumps({"frame": f, "obs": obs}) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "TrackSet":
        frames, tracks, uvs = [], [], []
        n_frames = 0
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            f = int(rec["frame"])
            n_frames = max(n_frames, f + 1)
            for tid, u, v in rec["obs"]:
                frames.append(f)
                tracks.append(int(tid))
                uvs.append((u, v))
        frames = np.asarray(frames, dtype=np.int64)
        tracks = np.asarray(tracks, dtype=np.int64)
        uvs = np.asarray(uvs, dtype=float).reshape(-1, 2)
        if len(tracks):
            _, tracks = np.unique(tracks, return_inverse=True)
        order = np.lexsort((tracks, frames))
        return cls(n_frames, frames[order], tracks[order], uvs[order])

    def truncated(self, window: int) -> "TrackSet":
        """Drop observations more than ``window - 1`` frames after a track's first one."""
        if len(self.obs_track) == 0:
            return self
        first = np.full(self.n_tracks, np.iinfo(np.int64).max)
        np.minimum.at(first, self.obs_track, self.obs_frame)
        keep = self.obs_frame - first[self.obs_track] < window
        if keep.all():
            return self
        return replace(self, obs_frame=self.obs_frame[keep], obs_track=self.obs_track[keep], obs_uv=self.obs_uv[keep])

    def subsample(self, step: int) -> "TrackSet":
        """Keep every ``step``-th frame, renumbering frames and tracks."""
        if step <= 1:
            return self
        keep = self.obs_frame % step == 0
        frames = self.obs_frame[keep] // step
        tracks = self.obs_track[keep]
        counts = np.bincount(tracks, minlength=self.n_tracks)
        keep2 = counts[tracks] >= 2
        used, new_ids = np.unique(tracks[keep2], return_inverse=True)
        tp = None if self.track_point is None else self.track_point[used]
        tl = None if self.track_part is None else self.track_part[used]
        return TrackSet((self.n_frames + step - 1) // step, frames[keep2], new_ids, self.obs_uv[keep][keep2], tp, tl)


def _visible(network, R, t, K, ospec, pts):
    pc = pts @ R.T + t
    dist = np.linalg.norm(pc, axis=1)
    cand = np.flatnonzero((pc[:, 2] > 0) & (dist <= ospec.max_depth))
    if len(cand) == 0:
        return cand, np.zeros((0, 2))
    theta = np.arctan2(np.hypot(pc[cand, 0], pc[cand, 1]), pc[cand, 2])
    cand = cand[theta <= math.radians(ospec.fov_deg) / 2]
    uv = project(K, pc[cand])
    inimg = (uv[:, 0] >= 0) & (uv[:, 0] < ospec.width) & (uv[:, 1] >= 0) & (uv[:, 1] < ospec.height)
    cand, uv = cand[inimg], uv[inimg]
    if len(cand) == 0:
        return cand, uv
    C = -R.T @ t
    fr = np.linspace(0.03, 0.97, 24)
    samples = C[None, None, :] + fr[None, :, None] * (pts[cand][:, None, :] - C[None, None, :])
    ok = network.inside(samples.reshape(-1, 3)).reshape(len(cand), len(fr)).all(axis=1)
    return cand[ok], uv[ok]


def sample_observations(network: Network, poses, K: CameraIntrinsics, ospec: ObservationSpec) -> TrackSet:
    """Observe every visible surface point, add pixel noise, cut tracks to the window."""
    if ospec.sigma_px < 0:
        raise ValueError("noise sigma must be non-negative")
    if ospec.window < 2:
        raise ValueError("matching window must span at least 2 frames")
    rng = np.random.default_rng(ospec.seed)
    pts = network.points
    seen_f, seen_p, seen_uv = [], [], []
    empty = []
    for f, (R, t) in enumerate(poses):
        idx, uv = _visible(network, R, t, K, ospec, pts)
        if len(idx) == 0:
            empty.append(f)
        seen_f.append(np.full(len(idx), f))
        seen_p.append(idx)
        seen_uv.append(uv + rng.normal(0.0, ospec.sigma_px, uv.shape) if ospec.sigma_px > 0 else uv)
    fr = np.concatenate(seen_f).astype(np.int64)
    pid = np.concatenate(seen_p).astype(np.int64)
    uv = np.concatenate(seen_uv)

    # split each point's sightings into runs of consecutive frames, then into chunks of <= window
    order = np.lexsort((fr, pid))
    fr_s, pid_s = fr[order], pid[order]
    new_run = np.ones(len(order), dtype=bool)
    new_run[1:] = (pid_s[1:] != pid_s[:-1]) | (fr_s[1:] != fr_s[:-1] + 1)
    run_id = np.cumsum(new_run) - 1
    run_start = np.flatnonzero(new_run)
    pos_in_run = np.arange(len(order)) - run_start[run_id]
    chunk_key = run_id * (len(poses) + 1) + pos_in_run // ospec.window
    _, chunk, counts = np.unique(chunk_key, return_inverse=True, return_counts=True)
    keep = counts[chunk] >= 2
    # track ids ordered by (first frame, point index)
    first_frame = np.full(counts.shape, np.iinfo(np.int64).max)
    np.minimum.at(first_frame, chunk, fr_s)
    chunk_point = np.zeros(len(counts), dtype=np.int64)
    chunk_point[chunk] = pid_s
    valid = np.flatnonzero(counts >= 2)
    rank = np.lexsort((chunk_point[valid], first_frame[valid]))
    track_of_chunk = np.full(len(counts), -1)
    track_of_chunk[valid[rank]] = np.arange(len(valid))

    tr = track_of_chunk[chunk][keep]
    fr_k = fr_s[keep]
    uv_k = uv[order][keep]
    o2 = np.lexsort((tr, fr_k))
    track_point = network.points[chunk_point[valid[rank]]]
    track_part = network.point_part[chunk_point[valid[rank]]]
    return TrackSet(len(poses), fr_k[o2], tr[o2], uv_k[o2], track_point, track_part, empty)


def perturb_intrinsics(K: CameraIntrinsics, rel=None, **fields) -> CameraIntrinsics:
    """Scale selected intrinsic fields by ``1 + rel``, e.g. ``perturb_intrinsics(K, k1=0.02)``."""
    rel = dict(rel or {}, **fields)
    vals = K.to_json()
    for k, e in rel.items():
        if k not in vals:
            raise KeyError(f"unknown intrinsic field {k!r}")
        vals[k] = vals[k] * (1.0 + e)
    if vals["fx"] <= 0 or vals["fy"] <= 0:
        raise ValueError("perturbation drives a focal length non-positive")
    return CameraIntrinsics.from_json(vals)


# --- scenes -----------------------------------------------------------------------


@dataclass
class Scene:
    """A fully specified experiment input: network, trajectory and sensor."""

    network: PipeNetworkSpec
    trajectory: TrajectorySpec
    observation: ObservationSpec
    camera: CameraIntrinsics
    seed: int = 0

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        seed = int(d.get("seed", 0))
        tr = TrajectorySpec(**{**d.get("trajectory", {}), "seed": seed})
        ob = ObservationSpec(**{**d.get("noise", {}), "seed": seed})
        cam = CameraIntrinsics.from_json(d["camera"])
        return cls(PipeNetworkSpec.from_json(d), tr, ob, cam, seed)

    def to_json(self) -> dict:
        d = self.network.to_json()
        d["trajectory"] = {k: v for k, v in asdict(self.trajectory).items() if k != "seed"}
        d["noise"] = {k: v for k, v in asdict(self.observation).items() if k != "seed"}
        d["camera"] = self.camera.to_json()
        d["seed"] = self.seed
        return d

    def with_overrides(self, seed=None, noise=None) -> "Scene":
        d = self.to_json()
        if seed is not None:
            d["seed"] = int(seed)
        if noise is not None:
            d["noise"]["sigma_px"] = float(noise)
        return Scene.from_json(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SimulationResult:
    scene: Scene
    network: Network
    poses: list
    tracks: TrackSet


def simulate(scene: Scene) -> SimulationResult:
    network = build_network(scene.network, seed=scene.seed)
    poses = generate_trajectory(network, scene.trajectory)
    tracks = sample_observations(network, poses, scene.camera, scene.observation)
    return SimulationResult(scene, network, poses, tracks)


def ground_truth_json(sim: SimulationResult) -> dict:
    return {
        "radius": sim.scene.network.radius,
        "intrinsics": sim.scene.camera.to_json(),
        "poses": [{"R": R.reshape(-1).tolist(), "t": t.tolist()} for R, t in sim.poses],
        "parts": sim.network.describe(),
        "track_point": sim.tracks.track_point.tolist(),
        "track_part": sim.tracks.track_part.tolist(),
    }


def ground_truth_arrays(d: dict) -> dict:
    """Ground-truth dict with poses and per-track fields as numpy arrays."""
    d = dict(d)
    d["poses"] = [(np.array(p["R"]).reshape(3, 3), np.array(p["t"])) for p in d["poses"]]
    d["track_point"] = np.array(d["track_point"]).reshape(-1, 3)
    d["track_part"] = np.array(d["track_part"], dtype=np.int64)
    return d


def load_ground_truth(path) -> dict:
    return ground_truth_arrays(json.loads(Path(path).read_text()))


PRESETS = ("network-a", "network-b", "network-c", "network-d", "straight", "cylinder")


def load_preset(name: str) -> Scene:
    fname = name.replace("-", "_") + ".json"
    text = resources.files("pipesfm.presets").joinpath(fname).read_text()
    return Scene.from_json(json.loads(text))
