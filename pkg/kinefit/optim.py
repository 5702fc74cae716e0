"""AdamW with decoupled weight decay and the exponential learning-rate schedule."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First and second moments per parameter block."""
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def learning_rate_at(step: int, config) -> float:
    """``lr_start * (lr_end / lr_start) ** (step / steps)``."""
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if step == config.steps:
        return float(config.lr_end)
    return float(config.lr_start * (config.lr_end / config.lr_start) ** (step / config.steps))


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    config,
    decay: set[str] | None = None,
    weight_decay: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update with decoupled weight decay.

    Args:
        params: Parameter blocks.
        grads: Gradients with the same keys and shapes.
        state: Moments; updated in place and returned.
        lr: Learning rate for this step.
        config: Supplies ``beta1``, ``beta2``, ``eps`` and ``weight_decay``.
        decay: Block names that receive weight decay. Default: all blocks.
        weight_decay: Override of ``config.weight_decay`` (0 gives plain Adam).

    Returns:
        ``(new_params, state)``. When any gradient is non-finite the step is
        skipped: parameters and moments are returned unchanged and
        ``state.skipped`` is incremented.
    """
    if set(grads) != set(params):
        raise ShapeError(f"gradient blocks {sorted(grads)} do not match parameters {sorted(params)}")
    for key, p in params.items():
        if grads[key].shape != p.shape:
            raise ShapeError(f"gradient '{key}' has shape {grads[key].shape}, parameter {p.shape}")
    bad = [key for key, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        state.skipped += 1
        logger.warning("skipping update: non-finite gradient in %s", ", ".join(sorted(bad)))
        return params, state

    b1, b2, eps = config.beta1, config.beta2, config.eps
    wd = config.weight_decay if weight_decay is None else weight_decay
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updated = {}
    for key, p in params.items():
        g = grads[key]
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        direction = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd and (decay is None or key in decay):
            direction = direction + wd * p
        updated[key] = p - lr * direction
    return updated, state
