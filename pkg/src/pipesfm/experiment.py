"""Paired synthetic runs: simulate a preset, reconstruct, evaluate.

Constrained and unconstrained runs of one (preset, seed) share the same
tracks, the same intrinsics error and the same RANSAC seed, so their
metrics differ only by the cylinder term.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

from .evaluate import evaluate, model_to_json, segment_radius_profile
from .sfm import RunConfig, run_pipeline
from .sim import ground_truth_arrays, ground_truth_json, load_preset, perturb_intrinsics, simulate


@dataclass
class RunRecord:
    preset: str
    seed: int
    constrained: bool
    k1_rel: float
    rmse: float
    per_pipe: list
    n_pipes: int
    expected_pipes: int
    axis_errors_deg: list
    profile: list  # (part index, mean radius / first segment's, points)
    registered: int
    n_frames: int
    seconds: float
    posthoc: bool
    scale: float
    model_json: str = field(repr=False, default="")

    def summary(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "model_json"}
        d["mode"] = "constrained" if self.constrained else "unconstrained"
        return d


class SceneCache:
    """Simulated scenes keyed by (preset, seed); simulation is deterministic."""

    def __init__(self):
        self._sims = {}

    def get(self, preset, seed):
        key = (preset, int(seed))
        if key not in self._sims:
            scene = load_preset(preset).with_overrides(seed=seed)
            sim = simulate(scene)
            self._sims[key] = (sim, ground_truth_arrays(ground_truth_json(sim)))
        return self._sims[key]


_default_cache = SceneCache()


def run_scene(preset, seed=0, constrained=True, k1_rel=0.0, config: dict | None = None, cache: SceneCache | None = None) -> RunRecord:
    """One reconstruction of a preset with k1 mis-calibrated by ``k1_rel`` (relative)."""
    sim, gt = (cache or _default_cache).get(preset, seed)
    scene = sim.scene
    K = perturb_intrinsics(scene.camera, k1=k1_rel) if k1_rel else scene.camera
    cfg = RunConfig.from_json({**(config or {}), "radius": scene.network.radius, "constrained": constrained, "seed": int(seed)})
    t0 = time.perf_counter()
    model, _ = run_pipeline(sim.tracks, K, cfg)
    seconds = time.perf_counter() - t0
    n_straight = sum(1 for p in gt["parts"] if p["kind"] == "straight")
    rep, _ = evaluate(model, scene.network.radius, n_pipes=n_straight, ground_truth=gt)
    prof = segment_radius_profile(model, gt)
    r0 = prof[0][1] if prof else 1.0
    mode = "constrained" if cfg.cylinder_active else "unconstrained"
    return RunRecord(
        preset=preset, seed=int(seed), constrained=constrained, k1_rel=k1_rel,
        rmse=rep.overall, per_pipe=rep.per_pipe, n_pipes=len(model.pipes), expected_pipes=n_straight,
        axis_errors_deg=rep.axis_errors_deg, profile=[(i, r / r0, n) for i, r, n in prof],
        registered=int(model.registered.sum()), n_frames=int(model.n_frames), seconds=seconds,
        posthoc=rep.posthoc, scale=rep.scale,
        model_json=json.dumps(model_to_json(model, cfg.digest(), mode), sort_keys=True),
    )


def paired_run(preset, seed=0, k1_rel=0.0, config: dict | None = None, cache: SceneCache | None = None):
    """``(unconstrained, constrained)`` records on identical inputs."""
    return tuple(run_scene(preset, seed, c, k1_rel, config, cache) for c in (False, True))
