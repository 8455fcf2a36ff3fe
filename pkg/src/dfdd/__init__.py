"""Depth from differential defocus: simulator, estimation pipeline and calibration.

Two images of the same scene taken at slightly different sensor distances are
aligned to a common magnification; their difference and mean Laplacian give a
per-pixel depth and confidence in a few dozen arithmetic operations.
"""
from .calib import CalibrationError, CalibrationRecord, calibrate_ab, fit_homography, mae, working_range
from .imagecore import Homography, Kernel
from .pipeline import DepthResult, PipelineParams, run_pipeline
from .sim import Motion, NoiseSpec, OpticsConfig, SceneSpec, desk_optics, render_pair

__all__ = [
    "CalibrationError",
    "CalibrationRecord",
    "DepthResult",
    "Homography",
    "Kernel",
    "Motion",
    "NoiseSpec",
    "OpticsConfig",
    "PipelineParams",
    "SceneSpec",
    "calibrate_ab",
    "desk_optics",
    "fit_homography",
    "mae",
    "render_pair",
    "run_pipeline",
    "working_range",
]

__version__ = "0.1.0"
