"""Loss terms: robust reprojection, site-offset regularization, constraint penalty.

    L = sum_n (L_reproj^n + lambda_eps * L_eps^n) + lambda_beta * L_beta

Every term accepts plain or traced inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .camera import CameraRig, project_points
from .exceptions import ShapeError
from .kinematics import constraint_error
from .model import SkeletonModel, SubjectParams

# confidence sigmoid: half maximum at 30 mm, width 10 mm
CONFIDENCE_MIDPOINT_MM = 30.0
CONFIDENCE_WIDTH_MM = 10.0


@dataclass
class TrialObservations:
    """Keypoints for one trial: ``(T, J, C, 2)`` pixels with ``(T, J, C)`` confidences."""
    name: str
    times: np.ndarray
    keypoints: np.ndarray
    confidences: np.ndarray
    camera_names: tuple[str, ...]
    joint_names: tuple[str, ...] = ()
    fps: float = 30.0
    tag: str = "all"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.camera_names = tuple(self.camera_names)
        self.joint_names = tuple(self.joint_names)
        n_frames = self.times.shape[0]
        if self.keypoints.ndim != 4 or self.keypoints.shape[-1] != 2:
            raise ShapeError(f"{self.name}: keypoints must be (T, J, C, 2), got {self.keypoints.shape}")
        if self.keypoints.shape[:3] != self.confidences.shape:
            raise ShapeError(f"{self.name}: confidences {self.confidences.shape} do not match keypoints")
        if self.keypoints.shape[0] != n_frames or self.times.ndim != 1:
            raise ShapeError(f"{self.name}: {n_frames} times for {self.keypoints.shape[0]} frames")
        if self.keypoints.shape[2] != len(self.camera_names):
            raise ShapeError(f"{self.name}: {len(self.camera_names)} camera names for {self.keypoints.shape[2]} views")
        if self.joint_names and len(self.joint_names) != self.keypoints.shape[1]:
            raise ShapeError(f"{self.name}: {len(self.joint_names)} joint names for {self.keypoints.shape[1]} joints")
        if np.any(self.confidences < 0) or np.any(self.confidences > 1):
            raise ValueError(f"{self.name}: confidences must lie in [0, 1]")
        if n_frames > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"{self.name}: times must be strictly increasing")

    @property
    def n_frames(self) -> int:
        return self.keypoints.shape[0]

    @property
    def n_joints(self) -> int:
        return self.keypoints.shape[1]

    @property
    def n_cameras(self) -> int:
        return self.keypoints.shape[2]

    @property
    def duration(self) -> float:
        return max((self.n_frames - 1) / self.fps, 1.0 / self.fps)

    def subset(self, frames) -> "TrialObservations":
        """Observations at the given frame indices (repeats allowed)."""
        frames = np.asarray(frames, dtype=np.int64)
        return _FrameSubset(self, frames)

    def check_model(self, model: SkeletonModel) -> None:
        if self.n_joints != model.n_sites:
            raise ShapeError(f"{self.name}: {self.n_joints} keypoints per frame, model has {model.n_sites} sites")
        if self.joint_names and self.joint_names != model.site_names:
            raise ShapeError(f"{self.name}: keypoint order does not match the model's sites")


class _FrameSubset:
    """Minibatch view; unlike a trial its times may repeat."""

    def __init__(self, trial: TrialObservations, frames: np.ndarray):
        self.name = trial.name
        self.frames = frames
        self.times = trial.times[frames]
        self.keypoints = trial.keypoints[frames]
        self.confidences = trial.confidences[frames]
        self.camera_names = trial.camera_names


@dataclass(frozen=True)
class LossWeights:
    lambda_beta: float = 1.0
    lambda_eps: float = 0.01
    huber_delta: float = 10.0

    def __post_init__(self):
        if min(self.lambda_beta, self.lambda_eps, self.huber_delta) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossComponents:
    """Per-iteration loss terms, summed over trials where applicable."""
    l_reproj: object = 0.0
    l_beta: object = 0.0
    l_eps: object = 0.0
    has_constraints: bool = False
    extra: dict = field(default_factory=dict)


def confidence_from_std(sigma_mm):
    """Keypoint confidence from a triangulation spread in millimeters."""
    sigma = np.asarray(sigma_mm, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("standard deviation must be non-negative")
    z = (sigma - CONFIDENCE_MIDPOINT_MM) / CONFIDENCE_WIDTH_MM
    # exp overflows harmlessly to inf for huge sigma
    with np.errstate(over="ignore"):
        w = 1.0 / (1.0 + np.exp(z))
    return float(w) if w.ndim == 0 else w


def _rig_view(rig: CameraRig, camera_names, deltas):
    if tuple(camera_names) == rig.names:
        return rig, deltas
    order = np.array([rig.index(name) for name in camera_names])
    return rig.select(camera_names), None if deltas is None else deltas[order]


def reprojection_residuals(markers, obs, rig: CameraRig, deltas=None, with_mask: bool = False):
    """
    Pixel residuals ``(B, J, C, 2)`` and confidences zeroed behind cameras.

    With ``with_mask`` the second value is the boolean in-front mask instead.
    """
    rig, deltas = _rig_view(rig, obs.camera_names, deltas)
    if ad.value_of(markers).shape[:2] != obs.keypoints.shape[:2]:
        raise ShapeError(
            f"markers {ad.value_of(markers).shape} do not match observations {obs.keypoints.shape[:2]}"
        )
    pixels, in_front = project_points(rig, markers, deltas)
    if with_mask:
        return pixels - obs.keypoints, in_front
    return pixels - obs.keypoints, obs.confidences * in_front


def reprojection_loss(markers, obs, rig: CameraRig, deltas=None, huber_delta: float = 10.0):
    """Mean over sampled ``(t, j, c)`` of ``w * huber(|Pi_c x - y|)``."""
    residuals, weights = reprojection_residuals(markers, obs, rig, deltas)
    penalty = ad.huber_norm(residuals, huber_delta)
    return ad.sum(weights * penalty) / weights.size


def offset_regularization(subject) -> object:
    """Mean squared site offset; scale parameters are not penalized."""
    offsets = subject.site_offsets if isinstance(subject, SubjectParams) else subject
    return ad.mean(ad.square(offsets))


def constraint_loss(model: SkeletonModel, pose):
    """Mean squared constraint violation, 0 for models without constraints."""
    if not model.constraints:
        return 0.0
    return ad.mean(ad.square(constraint_error(model, pose)))


def total_loss(components: LossComponents, weights: LossWeights = LossWeights()):
    total = components.l_reproj + weights.lambda_beta * components.l_beta
    if components.has_constraints:
        total = total + weights.lambda_eps * components.l_eps
    return total
