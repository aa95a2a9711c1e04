"""Monocular structure-from-motion for pipe networks.

Incremental reconstruction from fisheye feature tracks, with straight pipes
detected as cones and pulled back to their known radius by a cylinder term
in bundle adjustment. A synthetic pipe-network simulator supplies the data.
"""

__version__ = "0.1.0"

from .camera import CameraIntrinsics, project, unproject
from .conic import Cone, Cylinder, DetectionConfig, detect_pipes, fit_cylinder, refine_cone
from .evaluate import EvalReport, evaluate, posthoc_fit_and_scale, radius_rmse
from .model import PipeInstance, ReconstructionModel
from .sfm import InitializationError, RunConfig, run_pipeline
from .sim import Scene, TrackSet, load_preset, perturb_intrinsics, simulate

__all__ = [
    "CameraIntrinsics", "project", "unproject",
    "Cone", "Cylinder", "DetectionConfig", "detect_pipes", "fit_cylinder", "refine_cone",
    "EvalReport", "evaluate", "posthoc_fit_and_scale", "radius_rmse",
    "PipeInstance", "ReconstructionModel",
    "InitializationError", "RunConfig", "run_pipeline",
    "Scene", "TrackSet", "load_preset", "perturb_intrinsics", "simulate",
]
