"""Radius-rate error, post-hoc pipe fitting for unconstrained models, export."""
from __future__ import annotations

import copy
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .conic import DetectionConfig, fit_cylinder, sequential_ransac, shape_from_json
from .geometry import umeyama
from .model import PipeInstance, ReconstructionModel
from .sim import TrackSet


class EmptyReportError(ValueError):
    pass


@dataclass
class EvalReport:
    per_pipe: list
    overall: float
    inlier_counts: list
    n_pipes: int
    expected_pipes: int | None = None
    axis_errors_deg: list | None = None
    scale: float = 1.0
    posthoc: bool = False
    notes: list = field(default_factory=list)
    detector: dict | None = None

    def to_json(self) -> dict:
        return asdict(self)


def radius_rmse(X, assignment, axes, r) -> EvalReport:
    """Pooled and per-pipe RMSE of (r_i - r) / r over pipe inliers.

    ``assignment[j]`` is the pipe index of point ``j`` (negative: none) and
    ``axes[i]`` any object with an ``axis_distance`` method.
    """
    X = np.asarray(X, dtype=float)
    assignment = np.asarray(assignment)
    if len(axes) == 0 or not np.any(assignment >= 0):
        raise EmptyReportError("no pipe instances with inliers to evaluate")
    per, counts, pooled = [], [], []
    for i, ax in enumerate(axes):
        sel = assignment == i
        counts.append(int(sel.sum()))
        if not sel.any():
            per.append(None)
            continue
        e = (ax.axis_distance(X[sel]) - r) / r
        per.append(float(np.sqrt(np.mean(e**2))))
        pooled.append(e)
    e = np.concatenate(pooled)
    return EvalReport(per, float(np.sqrt(np.mean(e**2))), counts, len(axes))


def model_rmse(model, r=None) -> EvalReport:
    r = model.radius if r is None else r
    ids = np.flatnonzero(model.has_point)
    return radius_rmse(model.X[ids], model.point_pipe[ids], [p.shape for p in model.pipes], r)


def copy_model(model):
    """Independent copy of a reconstruction (the track table is shared, read-only)."""
    tracks = model.tracks
    model.tracks = None
    try:
        out = copy.deepcopy(model)
    finally:
        model.tracks = tracks
    out.tracks = tracks
    return out


def posthoc_fit_and_scale(model, n_pipes, r, rng, config: DetectionConfig | None = None):
    """Fit ``n_pipes`` cones by sequential RANSAC and rescale to radius ``r``.

    Returns ``(scaled_model, scale)``; the copy carries the fitted pipes as
    instances. Fewer instances than requested yields a warning and a partial
    result.
    """
    if n_pipes < 1:
        raise ValueError("n_pipes must be at least 1")
    ids = np.flatnonzero(model.has_point)
    if len(ids) < 9:
        raise ValueError(f"post-hoc fit needs at least 9 points, got {len(ids)}")
    cfg = config or DetectionConfig()
    order = model.registration_order or list(np.flatnonzero(model.registered))
    centers = model.camera_centers(sorted(order))
    found = sequential_ransac(model.X[ids], n_pipes, rng, cfg, centers=centers)
    out = copy_model(model)
    out.pipes = []
    out.point_pipe[:] = -1
    if len(found) < n_pipes:
        warnings.warn(f"post-hoc fit found {len(found)} of {n_pipes} pipe instances", RuntimeWarning, stacklevel=2)
    if not found:
        return out, 1.0
    for k, (shape, sub) in enumerate(found):
        pid = ids[sub]
        out.pipes.append(PipeInstance(shape, np.sort(pid), [], r, active=False))
        out.point_pipe[pid] = k
    dist = np.concatenate([p.shape.axis_distance(out.X[p.inliers]) for p in out.pipes])
    s = r / float(np.mean(dist))
    out.apply_similarity(s)
    return out, s


def evaluate(model, r=None, n_pipes=None, rng=None, ground_truth=None, config: DetectionConfig | None = None):
    """Full report: uses the model's own pipes, or the post-hoc fit when it has none."""
    r = model.radius if r is None else r
    posthoc = not model.pipes
    s = 1.0
    notes = []
    if posthoc:
        if n_pipes is None:
            raise ValueError("model has no pipe instances; the number of pipes is required")
        rng = np.random.default_rng(0) if rng is None else rng
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            model, s = posthoc_fit_and_scale(model, n_pipes, r, rng, config)
        notes += [str(x.message) for x in w]
    rep = model_rmse(model, r)
    rep.scale, rep.posthoc, rep.notes = s, posthoc, notes
    rep.expected_pipes = n_pipes
    rep.detector = asdict(config or DetectionConfig())
    if ground_truth is not None:
        rep.axis_errors_deg = axis_errors(model, ground_truth)
    return rep, model


def align_to_ground_truth(model, gt_poses):
    """Similarity (s, R, t) with gt_center ~ s R est_center + t over registered frames."""
    frames = np.flatnonzero(model.registered)
    est = model.camera_centers(frames)
    true = np.array([-gt_poses[f][0].T @ gt_poses[f][1] for f in frames])
    return umeyama(est, true)


def axis_errors(model, gt) -> list:
    """Angle (deg) between each pipe axis and the ground-truth straight it mostly covers."""
    _, Ra, _ = align_to_ground_truth(model, gt["poses"])
    dirs = {p["index"]: np.asarray(p["direction"]) for p in gt["parts"] if p["kind"] == "straight"}
    out = []
    for pipe in model.pipes:
        parts = gt["track_part"][pipe.inliers]
        parts = parts[np.isin(parts, list(dirs))]
        if len(parts) == 0:
            out.append(None)
            continue
        k = int(np.bincount(parts).argmax())
        d = Ra @ pipe.shape.direction
        c = abs(float(d @ dirs[k])) / np.linalg.norm(d)
        out.append(float(np.degrees(np.arctan2(np.sqrt(max(0.0, 1 - c * c)), c))))
    return out


def segment_radius_profile(model, gt, min_points=30):
    """Mean fitted radius of the model points on each ground-truth straight, in path order.

    Scale-free drift indicator: compare the values to the first segment.
    Returns a list of ``(part_index, mean_radius, n_points)``.
    """
    ids = np.flatnonzero(model.has_point)
    parts = gt["track_part"][ids]
    out = []
    for p in gt["parts"]:
        if p["kind"] != "straight":
            continue
        sel = ids[parts == p["index"]]
        if len(sel) < min_points:
            continue
        cyl = fit_cylinder(model.X[sel])
        d = cyl.axis_distance(model.X[sel])
        keep = np.abs(d - cyl.radius) < 0.25 * cyl.radius
        out.append((int(p["index"]), float(np.mean(d[keep])), int(keep.sum())))
    return out


# --------------------------------------------------------------------------
# export


def model_to_json(model, config_hash=None, mode=None) -> dict:
    frames = []
    for f in np.flatnonzero(model.registered):
        frames.append({
            "id": int(f),
            "R": model.R[f].reshape(-1).tolist(),
            "t": model.t[f].tolist(),
            "labels": sorted(int(i) for i in model.frame_labels[f]),
        })
    pts = np.flatnonzero(model.has_point)
    v = np.flatnonzero(model.obs_valid)
    d = {
        "intrinsics": model.K.to_json(),
        "radius": model.radius,
        "n_frames": int(model.n_frames),
        "n_tracks": int(len(model.has_point)),
        "init_pair": None if model.init_pair is None else [int(x) for x in model.init_pair],
        "intrinsics_free": bool(model.intrinsics_free),
        "frames": frames,
        "points": [{"id": int(j), "xyz": model.X[j].tolist(), "pipe": int(model.point_pipe[j])} for j in pts],
        "pipes": [
            {**p.shape.to_json(), "inlier_ids": [int(x) for x in p.inliers], "frame_ids": [int(x) for x in p.frames],
             "radius": p.radius, "active": bool(p.active)}
            for p in model.pipes
        ],
        "observations": [[int(model.obs_frame[o]), int(model.obs_track[o]), *model.obs_uv[o].tolist()] for o in v],
    }
    if config_hash is not None:
        d["config_hash"] = config_hash
    if mode is not None:
        d["mode"] = mode
    return d


def model_from_json(d) -> ReconstructionModel:
    obs = np.array(d["observations"], dtype=float).reshape(-1, 4)
    n_tracks = int(d["n_tracks"])
    order = np.lexsort((obs[:, 1], obs[:, 0]))
    obs = obs[order]
    tracks = TrackSet(
        n_frames=int(d["n_frames"]),
        obs_frame=obs[:, 0].astype(np.int64),
        obs_track=obs[:, 1].astype(np.int64),
        obs_uv=obs[:, 2:4].copy(),
        track_point=np.full((n_tracks, 3), np.nan),
        track_part=np.full(n_tracks, -1, dtype=np.int64),
        empty_frames=[],
    )
    m = ReconstructionModel(tracks, CameraIntrinsics.from_json(d["intrinsics"]), float(d["radius"]))
    m.obs_valid[:] = True
    m.init_pair = None if d.get("init_pair") is None else tuple(d["init_pair"])
    m.intrinsics_free = bool(d.get("intrinsics_free", False))
    for fr in d["frames"]:
        f = fr["id"]
        m.registered[f] = True
        m.R[f] = np.array(fr["R"]).reshape(3, 3)
        m.t[f] = np.array(fr["t"])
        m.frame_labels[f] = set(fr["labels"])
    for p in d["points"]:
        m.X[p["id"]] = p["xyz"]
        m.has_point[p["id"]] = True
        m.point_pipe[p["id"]] = p["pipe"]
    for p in d["pipes"]:
        m.pipes.append(PipeInstance(
            shape_from_json(p), np.array(p["inlier_ids"], dtype=np.int64), list(p["frame_ids"]),
            float(p["radius"]), bool(p.get("active", True)),
        ))
    m.registration_order = [fr["id"] for fr in d["frames"]]
    return m


def save_model_json(model, path, config_hash=None, mode=None):
    Path(path).write_text(json.dumps(model_to_json(model, config_hash, mode), sort_keys=True) + "\n")


def load_model_json(path) -> ReconstructionModel:
    return model_from_json(json.loads(Path(path).read_text()))


def export_ply(model, path):
    """ASCII PLY: scene points in gray, camera centres in red."""
    pts = model.X[model.has_point]
    cams = model.camera_centers()
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(pts) + len(cams)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} 128 128 128" for x, y, z in pts]
    lines += [f"{x:.6f} {y:.6f} {z:.6f} 255 0 0" for x, y, z in cams]
    Path(path).write_text("\n".join(lines) + "\n")


def format_table(rows, networks=None) -> str:
    """Aligned text table of RMSE values: one row per method, one column per network.

    ``rows`` maps method name to ``{network: rmse or None}``.
    """
    networks = networks or sorted({n for r in rows.values() for n in r})
    head = ["Method"] + list(networks)
    body = [[m] + [("-" if rows[m].get(n) is None else f"{rows[m][n]:.4f}") for n in networks] for m in rows]
    widths = [max(len(str(r[i])) for r in [head] + body) for i in range(len(head))]
    fmt = lambda r: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"
