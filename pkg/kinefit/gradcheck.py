"""Finite-difference check of the full fitting loss.

Builds small random scenes (two frames seen by two cameras) and compares the
reverse-mode gradient of the complete objective, trajectory weights, subject
parameters and camera deltas included, against central differences.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .camera import CameraRig, project_points
from .fitter import trial_loss
from .kinematics import marker_positions
from .model import SkeletonModel
from .objective import LossWeights, TrialObservations, offset_regularization
from .synth import SynthConfig, ring_rig
from .trajectory import EncodingConfig, encode_time, init_trajectory, trajectory_pose

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-5
# five-point differences; the scaled last layer puts large higher derivatives
# on the trajectory weights
FD_ORDER = 4
FD_STEP = 1e-5
SCENE_LAYERS = (8, 8)
# keeps every residual on the quadratic side of the Huber kink
KEYPOINT_NOISE_PX = 1.0


@dataclass
class GradcheckScene:
    """Parameter blocks plus everything the loss closes over."""
    params: dict[str, np.ndarray]
    model: SkeletonModel
    trial: TrialObservations
    rig: CameraRig
    features: np.ndarray
    weights: LossWeights
    n_layers: int

    def program(self, p):
        loss, aux = trial_loss(p, self.model, self.rig, self.trial, self.features, self.weights, self.n_layers)
        return loss + self.weights.lambda_beta * offset_regularization(p["offsets"]), aux

    def value(self, p) -> float:
        return float(ad.value_of(self.program(p)[0]))


def gradient_scene(model: SkeletonModel, seed: int, weights: LossWeights = LossWeights()) -> GradcheckScene:
    """Random trajectory network, subject, camera deltas and near-consistent observations."""
    rng = np.random.default_rng(seed)
    base = ring_rig(SynthConfig(n_cameras=2, fov_deg=60.0))
    rig = CameraRig(tuple(
        replace(cam, k1=float(rng.uniform(-0.05, 0.05)), k2=float(rng.uniform(-0.01, 0.01)))
        for cam in base.cameras
    ))

    times = np.array([0.0, 1.0 / 30.0])
    encoding = EncodingConfig.for_trial(len(times), 30.0)
    features = encode_time(times, encoding)
    traj = init_trajectory(int(rng.integers(2**31)), encoding, SCENE_LAYERS, model.n_dof)
    n_layers = len(traj.weights)
    params = traj.params()
    # move the pose away from the joint-range midpoints
    params[f"w{n_layers - 1}"] = params[f"w{n_layers - 1}"] * 20.0
    params["scales"] = rng.uniform(0.9, 1.1, size=model.n_scales)
    params["offsets"] = rng.normal(0.0, 0.01, size=(model.n_sites, 3))
    params["camera_deltas"] = np.concatenate(
        [rng.normal(0.0, 1e-3, size=(len(rig), 3)), rng.normal(0.0, 5e-3, size=(len(rig), 3))], axis=1
    )

    pose = trajectory_pose(
        [params[f"w{k}"] for k in range(n_layers)], [params[f"b{k}"] for k in range(n_layers)], features, model
    )
    markers = marker_positions(model, pose, params["scales"], params["offsets"])
    pixels, _ = project_points(rig, markers, params["camera_deltas"])
    trial = TrialObservations(
        name=f"gradcheck{seed}",
        times=times,
        keypoints=pixels + rng.normal(0.0, KEYPOINT_NOISE_PX, size=pixels.shape),
        confidences=rng.uniform(0.2, 1.0, size=pixels.shape[:3]),
        camera_names=rig.names,
    )
    return GradcheckScene(params, model, trial, rig, features, weights, n_layers)


@dataclass
class GradcheckReport:
    """Worst relative error per parameter block across all checked scenes."""
    n_scenes: int
    n_probes: int
    tolerance: float
    per_block: dict[str, float] = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max(self.per_block.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "n_probes": self.n_probes,
            "tolerance": self.tolerance,
            "max_relative_error": self.max_relative_error,
            "passed": self.passed,
            "per_block": dict(self.per_block),
        }


def check_scene(scene: GradcheckScene, rng: np.random.Generator, probes_per_block: int | None = 8, step: float = FD_STEP) -> dict[str, float]:
    """Max relative error per block at randomly probed coordinates (all of them when ``probes_per_block`` is None)."""
    result = ad.evaluate_with_gradients(scene.program, scene.params)
    coordinates = None
    if probes_per_block is not None:
        coordinates = {
            name: rng.choice(block.size, size=min(probes_per_block, block.size), replace=False)
            for name, block in scene.params.items()
        }
    numeric = ad.finite_difference_gradient(
        scene.value, scene.params, step=step, coordinates=coordinates, order=FD_ORDER
    )
    errors = {}
    for name, fd in numeric.items():
        probed = np.isfinite(fd)
        errors[name] = float(np.max(ad.relative_error(result.grads[name][probed], fd[probed]), initial=0.0))
    return errors


def run_gradcheck(
    model: SkeletonModel,
    n_scenes: int = 10,
    seed: int = 0,
    probes_per_block: int | None = 8,
    step: float = FD_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GradcheckReport:
    """
    Check the full loss gradient on ``n_scenes`` random scenes.

    Returns:
        GradcheckReport; ``passed`` is False when any probed coordinate
        disagrees by ``tolerance`` or more.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be at least 1")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(n_scenes=n_scenes, n_probes=0, tolerance=tolerance)
    for i in range(n_scenes):
        scene = gradient_scene(model, seed * 100003 + i)
        errors = check_scene(scene, rng, probes_per_block, step)
        for name, err in errors.items():
            report.per_block[name] = max(report.per_block.get(name, 0.0), err)
        n = sum(b.size if probes_per_block is None else min(probes_per_block, b.size) for b in scene.params.values())
        report.n_probes += n
        report.losses.append(scene.value(scene.params))
        logger.debug("scene %d: worst relative error %.3g", i, max(errors.values()))
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, "gradient check over %d scene(s): max relative error %.3g", n_scenes, report.max_relative_error)
    return report
