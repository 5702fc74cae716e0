"""kinefit - multi-camera inverse kinematics with implicit trajectories."""

__version__ = "0.1.0"

from .camera import Camera, CameraRig, ExtrinsicDelta, load_rig, project, project_points
from .config import FitConfig, load_config
from .exceptions import (
    BehindCameraError,
    DegenerateGeometryError,
    DivergenceError,
    KinefitError,
    MetricUndefinedError,
    ModelSemanticError,
    ModelSyntaxError,
    NonFiniteError,
    ShapeError,
    TrialFormatError,
)
from .fitter import MetaFit, SessionFit, fit_session, meta_fit
from .kinematics import constraint_error, forward_kinematics, marker_positions, squash_to_limits
from .model import SkeletonModel, SubjectParams, load_demo_model, load_model, parse_model, serialize_model
from .objective import LossWeights, TrialObservations
from .presets import PRESETS, get_preset
from .trials import read_trial, write_trial

__all__ = [
    "BehindCameraError",
    "Camera",
    "CameraRig",
    "DegenerateGeometryError",
    "DivergenceError",
    "ExtrinsicDelta",
    "FitConfig",
    "KinefitError",
    "LossWeights",
    "MetaFit",
    "MetricUndefinedError",
    "ModelSemanticError",
    "ModelSyntaxError",
    "NonFiniteError",
    "PRESETS",
    "SessionFit",
    "ShapeError",
    "SkeletonModel",
    "SubjectParams",
    "TrialFormatError",
    "TrialObservations",
    "constraint_error",
    "fit_session",
    "forward_kinematics",
    "get_preset",
    "load_config",
    "load_demo_model",
    "load_model",
    "load_rig",
    "marker_positions",
    "meta_fit",
    "parse_model",
    "project",
    "project_points",
    "read_trial",
    "serialize_model",
    "squash_to_limits",
    "write_trial",
]
