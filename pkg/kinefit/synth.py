"""Synthetic walking sessions with exact ground truth.

The gait is closed-form: every joint follows a sinusoid of the gait phase
and the root moves forward at ``stride_length * cadence / 120`` m/s, so the
motion is exactly periodic. Consequently stride length equals the configured
value, step length is half of it and step width is whatever the hip
adduction angle makes it; that angle is solved numerically so the heels are
``step_width`` apart at contact. Contact is the heel-height minimum of each
cycle.

Patterns (right leg, phase ``p``; the left leg uses ``p + pi``; ``a`` is
stride_length / 1.2):

    hip_flexion   0.2 + 0.25 a cos p
    knee_angle    hip_flexion + 0.15 + 0.3 a (1 - cos(p - 2))
    ankle_angle   0.1 sin p
    arm_flex      -0.2 cos p
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial.transform import Rotation

from .camera import Camera, CameraRig, ExtrinsicDelta, compose_extrinsic_delta, project_points, rig_to_json
from .exceptions import ShapeError
from .kinematics import forward_kinematics
from .metrics.gait import HeelStrike
from .model import SkeletonModel, SubjectParams
from .objective import TrialObservations, confidence_from_std
from .trials import WALKWAY_SUFFIX, write_trial

logger = logging.getLogger(__name__)

REFERENCE_STRIDE = 1.2
HIP_MEAN, HIP_AMP = 0.2, 0.25
KNEE_CLEARANCE, KNEE_AMP, KNEE_PHASE = 0.15, 0.3, 2.0
ANKLE_AMP = 0.1
ARM_AMP = 0.2
ELBOW_FLEX, PRO_SUP = 0.3, 0.5
SPINE_EXT_AMP, SPINE_BEND_AMP = 0.05, 0.03
LOOK_AT_HEIGHT = 0.9
# confidences are drawn from triangulation spreads in millimeters
INLIER_STD_MM = (5.0, 15.0)
OUTLIER_STD_MM = (40.0, 80.0)
SIDES = {"right": "_r", "left": "_l"}


@dataclass
class SynthConfig:
    n_trials: int = 2
    n_cameras: int = 8
    image_width: int = 2048
    image_height: int = 1536
    fov_deg: float = 70.0
    ring_radius: float = 6.0
    duration: float = 2.0
    frame_rate: float = 30.0
    stride_length: float = 1.2
    cadence: float = 110.0
    step_width: float = 0.1
    noise_px: float = 0.0
    outlier_rate: float = 0.0
    scales: dict[str, float] = field(default_factory=lambda: {"overall": 1.04})
    offset_std: float = 0.0
    rotation_perturbation_deg: float = 0.0
    translation_perturbation_mm: float = 0.0
    seed: int = 0
    tag: str = "all"

    def __post_init__(self):
        positive = ("n_trials", "n_cameras", "image_width", "image_height", "fov_deg",
                    "ring_radius", "duration", "frame_rate", "stride_length", "cadence", "step_width")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("noise_px", "offset_std", "rotation_perturbation_deg", "translation_perturbation_mm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.outlier_rate < 1:
            raise ValueError("outlier_rate must lie in [0, 1)")

    @property
    def n_frames(self) -> int:
        return max(1, int(round(self.duration * self.frame_rate)))

    @property
    def stride_frequency(self) -> float:
        """Strides per second."""
        return self.cadence / 120.0

    @property
    def speed(self) -> float:
        return self.stride_length * self.stride_frequency

    @property
    def focal_length(self) -> float:
        return 0.5 * self.image_width / np.tan(np.radians(0.5 * self.fov_deg))

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown synth config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def load_synth_config(path) -> SynthConfig:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: synth config must be a JSON object")
    return SynthConfig.from_dict(data)


@dataclass
class GroundTruth:
    """True poses, subject, rig and heel strikes behind a synthetic session."""
    trial_names: list[str]
    poses: list[np.ndarray]
    subject: SubjectParams
    rig: CameraRig
    events: list[list[HeelStrike]]
    stride_length: float
    step_width: float
    hip_adduction: float

    @property
    def step_length(self) -> float:
        return 0.5 * self.stride_length

    def to_dict(self, model: SkeletonModel) -> dict:
        return {
            "trial_names": self.trial_names,
            "dof_names": list(model.dof_names),
            "poses": [p.tolist() for p in self.poses],
            "subject": self.subject.to_dict(model),
            "rig": [cam.to_dict() for cam in self.rig.cameras],
            "events": [
                [{"side": e.side, "time": e.time, "position": e.position.tolist()} for e in trial]
                for trial in self.events
            ],
            "stride_length": self.stride_length,
            "step_length": self.step_length,
            "step_width": self.step_width,
            "hip_adduction": self.hip_adduction,
        }

    @classmethod
    def from_dict(cls, model: SkeletonModel, data: dict) -> "GroundTruth":
        if list(data["dof_names"]) != list(model.dof_names):
            raise ShapeError("ground truth was generated for a different model")
        return cls(
            trial_names=list(data["trial_names"]),
            poses=[np.asarray(p, dtype=np.float64) for p in data["poses"]],
            subject=SubjectParams.from_dict(model, data["subject"]),
            rig=CameraRig(tuple(Camera.from_dict(c) for c in data["rig"])),
            events=[[HeelStrike(e["side"], e["time"], e["position"]) for e in trial] for trial in data["events"]],
            stride_length=float(data["stride_length"]),
            step_width=float(data["step_width"]),
            hip_adduction=float(data["hip_adduction"]),
        )


def load_truth(path, model: SkeletonModel) -> GroundTruth:
    return GroundTruth.from_dict(model, json.loads(Path(path).read_text()))


@dataclass
class SynthSession:
    rig: CameraRig
    trials: list[TrialObservations]
    truth: GroundTruth


class GaitPattern:
    """Closed-form walking poses for a model with the demo biped's joint names."""

    def __init__(self, model: SkeletonModel, config: SynthConfig, subject: SubjectParams):
        self.model = model
        self.config = config
        self.subject = subject
        self.amp = config.stride_length / REFERENCE_STRIDE
        self.adduction = 0.0
        self.height = 0.0
        root = model.joints[0]
        if root.kind != "free":
            raise ValueError("synthetic gait needs a free root joint")
        self.root = model.joint_dof_start[0]
        self.heels = {side: model.site_index(f"heel{suffix}") for side, suffix in SIDES.items()}
        self.dof = {name: i for i, name in enumerate(model.dof_names)}

    def _set(self, pose, name, values):
        if name in self.dof:
            pose[:, self.dof[name]] = values

    def poses(self, phase, root_xy=(0.0, 0.0)) -> np.ndarray:
        """Poses ``(N, n_dof)`` at right-leg phases ``phase``; root at the given x, y."""
        phase = np.atleast_1d(np.asarray(phase, dtype=np.float64))
        pose = np.zeros((phase.size, self.model.n_dof))
        root_xy = np.broadcast_to(np.asarray(root_xy, dtype=np.float64), (phase.size, 2))
        pose[:, self.root] = root_xy[:, 0]
        pose[:, self.root + 1] = root_xy[:, 1]
        pose[:, self.root + 2] = self.height
        for suffix, shift in (("_r", 0.0), ("_l", np.pi)):
            p = phase + shift
            hip = HIP_MEAN + HIP_AMP * self.amp * np.cos(p)
            self._set(pose, f"hip_flexion{suffix}", hip)
            self._set(pose, f"hip_adduction{suffix}", self.adduction)
            self._set(pose, f"knee_angle{suffix}", hip + KNEE_CLEARANCE + KNEE_AMP * self.amp * (1.0 - np.cos(p - KNEE_PHASE)))
            self._set(pose, f"ankle_angle{suffix}", ANKLE_AMP * np.sin(p))
            self._set(pose, f"arm_flex{suffix}", -ARM_AMP * np.cos(p))
            self._set(pose, f"elbow_flex{suffix}", ELBOW_FLEX)
            self._set(pose, f"pro_sup{suffix}", PRO_SUP)
        self._set(pose, "l1_extension", SPINE_EXT_AMP * np.sin(2.0 * phase))
        self._set(pose, "l1_bending", SPINE_BEND_AMP * np.sin(phase))
        for c in self.model.constraints:
            pose[:, c.dof_a] = c.ratio * pose[:, c.dof_b] + c.offset
        return pose

    def markers(self, pose) -> np.ndarray:
        return forward_kinematics(self.model, pose, self.subject)

    def heel(self, side: str, phase) -> np.ndarray:
        """Heel positions ``(N, 3)`` with the root at the origin."""
        return self.markers(self.poses(phase))[:, self.heels[side]]

    def contact_phase(self, side: str) -> float:
        """Right-leg phase in [0, 2 pi) at which ``side``'s heel is lowest."""
        grid = np.linspace(0.0, 2.0 * np.pi, 721)[:-1]
        i = int(np.argmin(self.heel(side, grid)[:, 2]))
        step = grid[1] - grid[0]
        res = minimize_scalar(
            lambda p: float(self.heel(side, p)[0, 2]),
            bounds=(grid[i] - step, grid[i] + step),
            method="bounded",
            options={"xatol": 1e-11},
        )
        return float(np.mod(res.x, 2.0 * np.pi))

    def heel_separation(self) -> float:
        left = self.heel("left", self.contact_phase("left"))[0, 1]
        right = self.heel("right", self.contact_phase("right"))[0, 1]
        return float(left - right)

    def solve(self) -> None:
        """Pick hip adduction for the configured step width, then put the lowest heel point on the ground."""
        target = self.config.step_width

        def residual(a):
            self.adduction = a
            return self.heel_separation() - target

        try:
            self.adduction = brentq(residual, -0.5, 0.5, xtol=1e-13)
        except ValueError:
            raise ValueError(f"step width {target} m is not reachable with hip_adduction in [-0.5, 0.5]") from None
        lowest = min(float(self.heel(side, self.contact_phase(side))[0, 2]) for side in SIDES)
        self.height = -lowest
        logger.debug("gait: hip adduction %.6f rad, pelvis height %.4f m", self.adduction, self.height)

    def check_limits(self, pose) -> None:
        lo, hi, bounded = self.model.dof_bounds
        for i in np.flatnonzero(bounded):
            if np.any(pose[:, i] <= lo[i]) or np.any(pose[:, i] >= hi[i]):
                raise ValueError(
                    f"configured gait drives {self.model.dof_names[i]} outside ({lo[i]:.4g}, {hi[i]:.4g})"
                )


def ring_rig(config: SynthConfig, center=(0.0, 0.0)) -> CameraRig:
    """Cameras evenly spaced on a circle, alternating between two heights, aimed at the walkway center."""
    target = np.array([center[0], center[1], LOOK_AT_HEIGHT])
    f = config.focal_length
    cameras = []
    for i in range(config.n_cameras):
        angle = 2.0 * np.pi * i / config.n_cameras
        height = 1.5 if i % 2 == 0 else 2.5
        position = np.array([
            center[0] + config.ring_radius * np.cos(angle),
            center[1] + config.ring_radius * np.sin(angle),
            height,
        ])
        z = target - position
        z /= np.linalg.norm(z)
        x = np.cross(z, [0.0, 0.0, 1.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rotation = np.stack([x, y, z])
        cameras.append(Camera(
            name=f"cam{i}",
            fx=f,
            fy=f,
            cx=0.5 * config.image_width,
            cy=0.5 * config.image_height,
            rotation=Rotation.from_matrix(rotation).as_rotvec(),
            translation=-rotation @ position,
            width=config.image_width,
            height=config.image_height,
        ))
    return CameraRig(tuple(cameras))


def perturb_rig(rig: CameraRig, rotation_deg: float, translation_mm: float, rng: np.random.Generator) -> CameraRig:
    """Miscalibrate every camera but the first by exactly the given magnitudes in random directions."""
    cameras = [rig.cameras[0]]
    for cam in rig.cameras[1:]:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        delta = ExtrinsicDelta(axis * np.radians(rotation_deg), direction * translation_mm / 1000.0)
        cameras.append(compose_extrinsic_delta(cam, delta))
    return CameraRig(tuple(cameras))


def _subject(model: SkeletonModel, config: SynthConfig, rng: np.random.Generator) -> SubjectParams:
    scales = np.ones(model.n_scales)
    for name, value in config.scales.items():
        if name not in model.scale_map.names:
            raise ValueError(f"unknown scale parameter '{name}'")
        scales[model.scale_map.names.index(name)] = value
    offsets = rng.normal(0.0, config.offset_std, size=(model.n_sites, 3)) if config.offset_std else np.zeros((model.n_sites, 3))
    subject = SubjectParams(scales, offsets)
    subject.validate(model)
    return subject


def generate_session(config: SynthConfig, model: SkeletonModel) -> SynthSession:
    """
    Build a synthetic session: true motion, observations and a (possibly
    miscalibrated) rig.

    Trial ``n`` starts at gait phase ``0.7 n`` with the walker centered on
    the origin and laterally offset by ``0.3 n`` meters. Keypoints are the
    true projections plus Gaussian noise; outliers are uniform image points
    with low confidence.
    """
    rng = np.random.default_rng(config.seed)
    subject = _subject(model, config, rng)
    gait = GaitPattern(model, config, subject)
    gait.solve()
    contact = {side: gait.contact_phase(side) for side in SIDES}

    true_rig = ring_rig(config)
    rig = true_rig
    if config.rotation_perturbation_deg or config.translation_perturbation_mm:
        rig = perturb_rig(true_rig, config.rotation_perturbation_deg, config.translation_perturbation_mm, rng)

    omega = 2.0 * np.pi * config.stride_frequency
    n_frames = config.n_frames
    times = np.arange(n_frames) / config.frame_rate
    last = times[-1]
    trials, poses_all, events_all = [], [], []
    for n in range(config.n_trials):
        name = f"trial{n + 1:02d}"
        phase0 = 0.7 * n
        x0 = -0.5 * config.speed * last
        y0 = 0.3 * n

        def root(t):
            t = np.atleast_1d(t)
            return np.column_stack([x0 + config.speed * t, np.full(t.shape, y0)])

        poses = gait.poses(phase0 + omega * times, root(times))
        gait.check_limits(poses)
        markers = gait.markers(poses)

        events = []
        for side, phase in contact.items():
            k0 = int(np.ceil((phase0 - phase) / (2.0 * np.pi)))
            k = k0
            while True:
                t = (phase + 2.0 * np.pi * k - phase0) / omega
                if t > last:
                    break
                if t >= 0.0:
                    heel = gait.markers(gait.poses(phase0 + omega * t, root(t)))[0, gait.heels[side]]
                    events.append(HeelStrike(side, float(t), heel))
                k += 1
        events.sort(key=lambda e: e.time)

        pixels, in_front = project_points(true_rig, markers)
        if not np.all(in_front):
            raise ValueError(f"{name}: some markers are behind a camera; enlarge ring_radius")
        keypoints = pixels + rng.normal(0.0, config.noise_px, size=pixels.shape) if config.noise_px else pixels.copy()
        spread = rng.uniform(*INLIER_STD_MM, size=pixels.shape[:3])
        if config.outlier_rate:
            outliers = rng.random(pixels.shape[:3]) < config.outlier_rate
            uniform = np.stack([
                rng.uniform(0.0, config.image_width, size=pixels.shape[:3]),
                rng.uniform(0.0, config.image_height, size=pixels.shape[:3]),
            ], axis=-1)
            keypoints = np.where(outliers[..., None], uniform, keypoints)
            spread = np.where(outliers, rng.uniform(*OUTLIER_STD_MM, size=pixels.shape[:3]), spread)

        trials.append(TrialObservations(
            name=name,
            times=times,
            keypoints=keypoints,
            confidences=confidence_from_std(spread),
            camera_names=rig.names,
            joint_names=model.site_names,
            fps=config.frame_rate,
            tag=config.tag,
        ))
        poses_all.append(poses)
        events_all.append(events)

    truth = GroundTruth(
        trial_names=[t.name for t in trials],
        poses=poses_all,
        subject=subject,
        rig=true_rig,
        events=events_all,
        stride_length=config.stride_length,
        step_width=config.step_width,
        hip_adduction=float(gait.adduction),
    )
    logger.info(
        "synthesized %d trial(s) of %d frames, %d cameras, noise %.3g px, outliers %.1f%%",
        len(trials), n_frames, len(rig), config.noise_px, 100 * config.outlier_rate,
    )
    return SynthSession(rig, trials, truth)


def write_walkway(events: list[HeelStrike], path) -> None:
    """Reference strikes as a JSON array of ``[time_s, x_m, y_m, side]``."""
    rows = [[e.time, float(e.position[0]), float(e.position[1]), e.side] for e in events]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def write_session(session: SynthSession, model: SkeletonModel, out_dir) -> list[Path]:
    """Write ``rig.json``, the trial file pairs, ``truth.json`` and one walkway file per trial."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rig_path = out / "rig.json"
    rig_path.write_text(rig_to_json(session.rig) + "\n")
    written.append(rig_path)
    for trial, events in zip(session.trials, session.truth.events):
        stem = write_trial(trial, out)
        written += [stem.with_name(stem.name + ".meta.json"), stem.with_name(stem.name + ".kpts.f32")]
        walkway = out / f"{trial.name}{WALKWAY_SUFFIX}"
        write_walkway(events, walkway)
        written.append(walkway)
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(session.truth.to_dict(model), indent=1) + "\n")
    written.append(truth_path)
    return written
