"""Command-line front end: simulate, reconstruct, evaluate, export.

Every command writes a ``manifest.json`` next to its outputs recording the
inputs' digests and the configuration hash, so a result can be traced back
to what produced it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .camera import CameraIntrinsics
from .evaluate import (
    EmptyReportError,
    evaluate,
    export_ply,
    format_table,
    load_model_json,
    model_to_json,
    save_model_json,
)
from .sim import PRESETS, NetworkSpecError, Scene, TrackSet, ground_truth_json, load_ground_truth, load_preset, simulate
from .sfm import InitializationError, RunConfig, run_pipeline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INIT = 2
EXIT_TRACKING_LOST = 3

log = logging.getLogger("pipesfm")


def _digest_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_scene(spec: str) -> Scene:
    if spec in PRESETS:
        return load_preset(spec)
    return Scene.from_json(json.loads(Path(spec).read_text()))


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    scene = _load_scene(args.spec).with_overrides(seed=args.seed, noise=args.noise)
    if args.window is not None:
        d = scene.to_json()
        d["noise"]["window"] = int(args.window)
        scene = Scene.from_json(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(scene)
    sim.tracks.write_jsonl(out / "scene.jsonl")
    _write_json(out / "gt.json", ground_truth_json(sim))
    _write_json(out / "spec.json", scene.to_json())
    scene.camera.save(out / "intrinsics.json")
    manifest = {
        "command": "simulate",
        "version": __version__,
        "seed": scene.seed,
        "spec_hash": scene.digest(),
        "n_frames": sim.tracks.n_frames,
        "n_tracks": sim.tracks.n_tracks,
        "n_observations": int(len(sim.tracks.obs_track)),
        "empty_frames": list(sim.tracks.empty_frames),
        "files": {name: _digest_file(out / name) for name in ("scene.jsonl", "gt.json", "spec.json", "intrinsics.json")},
    }
    _write_json(out / "manifest.json", manifest)
    straights = sum(1 for p in sim.network.describe() if p["kind"] == "straight")
    print(f"simulated {sim.tracks.n_frames} frames, {sim.tracks.n_tracks} tracks, {straights} straight pipes -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reconstruct

_FLAG_FIELDS = {
    "alpha": "alpha",
    "radius": "radius",
    "detect_interval": "detect_interval",
    "window": "window",
    "global_ba_growth": "global_ba_growth",
    "seed": "seed",
}


def build_run_config(args) -> RunConfig:
    """Config file first, then explicit flags on top."""
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for flag, key in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if args.no_cylinder_constraint:
        d["constrained"] = False
    return RunConfig.from_json(d)


def cmd_reconstruct(args) -> int:
    cfg = build_run_config(args)
    tracks = TrackSet.read_jsonl(args.tracks)
    if args.frame_step > 1:
        tracks = tracks.subsample(args.frame_step)
    K = CameraIntrinsics.load(args.intrinsics)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.digest()
    try:
        model, pipe = run_pipeline(tracks, K, cfg)
    except InitializationError as e:
        print(f"initialization failed: {e}", file=sys.stderr)
        _write_json(out / "manifest.json", {"command": "reconstruct", "config_hash": chash, "status": "init_failed", "error": str(e)})
        return EXIT_INIT
    mode = "constrained" if cfg.cylinder_active else "unconstrained"
    save_model_json(model, out / "model.json", config_hash=chash, mode=mode)
    export_ply(model, out / "model.ply")
    with open(out / "log.jsonl", "w") as fh:
        for rec in pipe.log.events:
            fh.write(json.dumps({**rec, "config_hash": chash}, sort_keys=True) + "\n")
        for rec in pipe.ba_reports:
            fh.write(json.dumps({"event": "ba_report", **rec, "config_hash": chash}, sort_keys=True) + "\n")
    n_reg = int(model.registered.sum())
    status = "ok" if n_reg == model.n_frames else "tracking_lost"
    _write_json(out / "config.json", cfg.to_json())
    _write_json(out / "manifest.json", {
        "command": "reconstruct",
        "version": __version__,
        "config_hash": chash,
        "mode": mode,
        "status": status,
        "tracks": str(args.tracks),
        "tracks_hash": _digest_file(args.tracks),
        "intrinsics_hash": _digest_file(args.intrinsics),
        "registered": n_reg,
        "n_frames": int(model.n_frames),
        "dropped_frames": [int(f) for f in pipe.log.dropped],
        "n_points": int(model.n_points),
        "n_pipes": len(model.pipes),
        "files": {name: _digest_file(out / name) for name in ("model.json", "model.ply", "log.jsonl", "config.json")},
    })
    print(f"{mode}: registered {n_reg}/{model.n_frames} frames, {model.n_points} points, {len(model.pipes)} pipes -> {out}")
    return EXIT_OK if status == "ok" else EXIT_TRACKING_LOST


# --------------------------------------------------------------------------
# evaluate


def _mode_of(path) -> str:
    d = json.loads(Path(path).read_text())
    return d.get("mode") or Path(path).parent.name


def cmd_evaluate(args) -> int:
    gt = load_ground_truth(args.gt) if args.gt else None
    radius = args.radius if args.radius is not None else (gt["radius"] if gt else None)
    n_pipes = args.n_pipes
    if n_pipes is None and gt is not None:
        n_pipes = sum(1 for p in gt["parts"] if p["kind"] == "straight")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, reports = {}, {}
    label = args.label or "rmse"
    status = EXIT_OK
    for path in args.model:
        model = load_model_json(path)
        mode = _mode_of(path)
        chash = json.loads(Path(path).read_text()).get("config_hash")
        try:
            rep, _ = evaluate(model, radius, n_pipes, np.random.default_rng(args.seed), ground_truth=gt)
        except EmptyReportError as e:
            print(f"{path}: {e}", file=sys.stderr)
            rows[mode] = {label: None}
            status = EXIT_USAGE
            continue
        reports[mode] = {**rep.to_json(), "model": str(path), "config_hash": chash}
        rows[mode] = {label: rep.overall}
    _write_json(out / "report.json", reports)
    table = format_table(rows, [label])
    (out / "table.txt").write_text(table)
    _write_json(out / "manifest.json", {
        "command": "evaluate",
        "version": __version__,
        "models": {str(p): _digest_file(p) for p in args.model},
        "config_hashes": {m: r["config_hash"] for m, r in reports.items()},
        "radius": radius,
        "n_pipes": n_pipes,
        "files": {name: _digest_file(out / name) for name in ("report.json", "table.txt")},
    })
    sys.stdout.write(table)
    return status


# --------------------------------------------------------------------------
# export


def cmd_export(args) -> int:
    model = load_model_json(args.model)
    d = json.loads(Path(args.model).read_text())
    if args.format == "ply":
        export_ply(model, args.out)
    else:
        Path(args.out).write_text(json.dumps(model_to_json(model, d.get("config_hash"), d.get("mode")), sort_keys=True) + "\n")
    print(f"wrote {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pipesfm", description="Monocular pipe-network reconstruction with cylinder-constrained bundle adjustment.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic pipe network into feature tracks")
    s.add_argument("--spec", required=True, help=f"scene JSON or a preset name ({', '.join(PRESETS)})")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="track noise sigma in px")
    s.add_argument("--window", type=int, help="maximum track length in frames")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="incremental reconstruction from tracks")
    r.add_argument("--tracks", required=True, help="scene.jsonl written by simulate")
    r.add_argument("--intrinsics", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="RunConfig JSON; flags override it")
    r.add_argument("--alpha", type=float, help="cylinder term weight (default 10)")
    r.add_argument("--radius", type=float, help="known inner radius in mm (default 8.05)")
    r.add_argument("--detect-interval", type=int, help="registered frames between pipe searches (default 30)")
    r.add_argument("--window", type=int, help="matching window in frames (default 50)")
    r.add_argument("--global-ba-growth", type=float, help="point growth in percent that triggers global BA (default 5)")
    r.add_argument("--no-cylinder-constraint", action="store_true", help="plain reprojection BA baseline")
    r.add_argument("--seed", type=int)
    r.add_argument("--frame-step", type=int, default=1, help="keep every n-th frame")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="radius-rate RMSE of one or more models")
    e.add_argument("--model", required=True, action="append", help="model.json (repeat for a table)")
    e.add_argument("--gt", help="gt.json from simulate (adds axis errors)")
    e.add_argument("--radius", type=float)
    e.add_argument("--n-pipes", type=int, help="straight pipes for the post-hoc fit (default: from --gt)")
    e.add_argument("--label", help="column header of the table")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export", help="write a model as PLY or JSON")
    x.add_argument("--model", required=True)
    x.add_argument("--format", choices=("ply", "json"), default="ply")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NetworkSpecError as e:
        print(f"invalid network spec: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
