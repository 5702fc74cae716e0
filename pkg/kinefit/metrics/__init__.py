"""Post-fit quality metrics."""

from .consistency import (
    GC_THRESHOLDS,
    ConsistencyReport,
    consistency_fraction,
    consistency_report,
    geometric_consistency,
    mean_residual,
    reprojection_errors,
    sigma_iqr,
)
from .gait import (
    Alignment,
    HeelStrike,
    StepRow,
    StepTable,
    align_trials,
    detect_heel_strikes,
    estimate_time_offset,
    heel_strikes,
    load_walkway,
    match_events,
    step_errors,
    step_parameters,
    walking_axes,
)

__all__ = [
    "GC_THRESHOLDS",
    "Alignment",
    "ConsistencyReport",
    "HeelStrike",
    "StepRow",
    "StepTable",
    "align_trials",
    "consistency_fraction",
    "consistency_report",
    "detect_heel_strikes",
    "estimate_time_offset",
    "geometric_consistency",
    "heel_strikes",
    "load_walkway",
    "match_events",
    "mean_residual",
    "reprojection_errors",
    "sigma_iqr",
    "step_errors",
    "step_parameters",
    "walking_axes",
]
