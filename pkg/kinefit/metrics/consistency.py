"""Geometric consistency: how often fitted markers reproject near the keypoints."""

from dataclasses import dataclass, field

import numpy as np

from ..camera import CameraRig
from ..exceptions import MetricUndefinedError
from ..objective import TrialObservations, reprojection_residuals

GC_THRESHOLDS = tuple(float(d) for d in range(1, 21))
DEFAULT_CONFIDENCE_FLOOR = 0.5
IQR_TO_SIGMA = 0.7413


def reprojection_errors(markers, obs: TrialObservations, rig: CameraRig, deltas=None) -> np.ndarray:
    """Pixel distance ``(T, J, C)`` per observation; points behind a camera are ``inf``."""
    markers = np.asarray(markers, dtype=np.float64)
    residuals, in_front = reprojection_residuals(markers, obs, rig, deltas, with_mask=True)
    return np.where(in_front, np.linalg.norm(residuals, axis=-1), np.inf)


def consistency_fraction(errors, confidences, d: float, confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR) -> float | None:
    """``#(error < d and w > floor) / #(w > floor)``; None when nothing clears the floor."""
    errors = np.asarray(errors)
    confident = np.asarray(confidences) > confidence_floor
    n = int(np.count_nonzero(confident))
    if n == 0:
        return None
    return int(np.count_nonzero(confident & (errors < d))) / n


def geometric_consistency(
    markers,
    obs: TrialObservations,
    rig: CameraRig,
    d: float = 5.0,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    deltas=None,
    strict: bool = False,
) -> float | None:
    """
    Fraction of confident keypoints within ``d`` pixels of the fitted markers.

    Args:
        markers: ``(T, J, 3)`` fitted marker positions at every observed frame.
        obs: The trial's observations.
        rig: Cameras to project with (bundle-adjusted when available).
        d: Pixel threshold.
        confidence_floor: Only observations with confidence above it count.
        deltas: Optional ``(C, 6)`` extrinsic deltas on top of ``rig``.
        strict: Raise MetricUndefinedError instead of returning None.
    """
    errors = reprojection_errors(markers, obs, rig, deltas)
    q = consistency_fraction(errors, obs.confidences, d, confidence_floor)
    if q is None and strict:
        raise MetricUndefinedError(f"{obs.name}: no observations above confidence {confidence_floor}")
    return q


@dataclass
class ConsistencyReport:
    """GC curve pooled over all observations and per trial."""
    thresholds: tuple[float, ...]
    confidence_floor: float
    fractions: list[float | None]
    per_trial: dict[str, list[float | None]] = field(default_factory=dict)

    @property
    def per_trial_mean(self) -> list[float | None]:
        means = []
        for i in range(len(self.thresholds)):
            values = [q[i] for q in self.per_trial.values() if q[i] is not None]
            means.append(float(np.mean(values)) if values else None)
        return means

    def at(self, d: float) -> float | None:
        return self.fractions[self.thresholds.index(float(d))]

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "confidence_floor": self.confidence_floor,
            "pooled": self.fractions,
            "per_trial_mean": self.per_trial_mean,
            "per_trial": self.per_trial,
        }


def consistency_report(
    markers_per_trial,
    trials: list[TrialObservations],
    rig: CameraRig,
    thresholds=GC_THRESHOLDS,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    deltas=None,
) -> ConsistencyReport:
    thresholds = tuple(float(d) for d in thresholds)
    pooled_errors, pooled_conf = [], []
    per_trial = {}
    for markers, obs in zip(markers_per_trial, trials, strict=True):
        errors = reprojection_errors(markers, obs, rig, deltas)
        pooled_errors.append(errors.reshape(-1))
        pooled_conf.append(obs.confidences.reshape(-1))
        per_trial[obs.name] = [consistency_fraction(errors, obs.confidences, d, confidence_floor) for d in thresholds]
    errors = np.concatenate(pooled_errors)
    confidences = np.concatenate(pooled_conf)
    fractions = [consistency_fraction(errors, confidences, d, confidence_floor) for d in thresholds]
    return ConsistencyReport(thresholds, confidence_floor, fractions, per_trial)


def mean_residual(markers, obs: TrialObservations, rig: CameraRig, deltas=None, confidence_floor: float = 0.0) -> float:
    """Mean pixel error over observations with confidence above the floor, in front of the camera."""
    errors = reprojection_errors(markers, obs, rig, deltas)
    mask = (obs.confidences > confidence_floor) & np.isfinite(errors)
    if not np.any(mask):
        raise MetricUndefinedError(f"{obs.name}: no usable observations")
    return float(np.mean(errors[mask]))


def sigma_iqr(samples) -> float:
    """Normalized interquartile range ``0.7413 * (Q3 - Q1)``, quartiles by linear interpolation."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    x = x[np.isfinite(x)]
    if x.size < 4:
        raise MetricUndefinedError(f"sigma_iqr needs at least 4 samples, got {x.size}")
    q1, q3 = np.percentile(x, [25.0, 75.0], method="linear")
    return float(IQR_TO_SIGMA * (q3 - q1))
