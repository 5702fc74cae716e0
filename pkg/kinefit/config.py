"""Fit configuration."""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from pydantic import TypeAdapter

from .objective import LossWeights
from .presets import get_preset

DEFAULT_FROZEN_SITES = ("heel_r", "heel_l")


@dataclass
class FitConfig:
    """Hyperparameters of a session or population fit.

    ``ba_start_step=None`` resolves to ``0.75 * steps``.
    """
    steps: int = 2000
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    beta1: float = 0.8
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    batch_timepoints: int = 48
    ba_start_step: int | None = None
    ba_lr: float = 1e-4
    bundle_adjust: bool = True
    layer_sizes: tuple[int, ...] = (64, 128, 256, 256)
    encoding_dim: int = 29
    lambda_beta: float = 1.0
    lambda_eps: float = 0.01
    huber_delta: float = 10.0
    seed: int = 0
    log_every: int = 100
    max_nonfinite: int = 10
    threads: int | None = None
    subjects_per_batch: int = 2
    frozen_sites: tuple[str, ...] = DEFAULT_FROZEN_SITES
    preset: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        self.frozen_sites = tuple(self.frozen_sites)
        if self.ba_start_step is None:
            self.ba_start_step = int(0.75 * self.steps)
        self.validate()

    def validate(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("learning rates must satisfy 0 < lr_end <= lr_start")
        if not 0 <= self.ba_start_step <= self.steps:
            raise ValueError(f"ba_start_step must lie in [0, {self.steps}]")
        if self.batch_timepoints < 1:
            raise ValueError("batch_timepoints must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.ba_lr < 0:
            raise ValueError("weight_decay and ba_lr must be non-negative")
        if self.subjects_per_batch < 1:
            raise ValueError("subjects_per_batch must be at least 1")
        if any(n < 1 for n in self.layer_sizes):
            raise ValueError("layer sizes must be positive")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_beta, self.lambda_eps, self.huber_delta)

    @property
    def workers(self) -> int:
        """Trial worker count: ``threads``, then ``KINEFIT_THREADS``, then min(4, cpus)."""
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get("KINEFIT_THREADS")
        if env:
            return max(1, int(env))
        return min(4, os.cpu_count() or 1)

    @classmethod
    def from_dict(cls, data: dict) -> "FitConfig":
        """Build from a mapping; a ``preset`` key supplies defaults for missing fields.

        Values are coerced to the field types (``"100"`` becomes ``100``);
        anything that does not convert raises a ``ValidationError``, which
        is a ``ValueError``.
        """
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        merged = {}
        if data.get("preset"):
            merged.update(get_preset(data["preset"]))
            # a preset switch point belongs to the preset step count
            if "steps" in data and "ba_start_step" not in data:
                merged["ba_start_step"] = None
        merged.update(data)
        return _ADAPTER.validate_python(merged)

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "FitConfig":
        return cls.from_dict({"preset": name, **overrides})

    def to_dict(self) -> dict:
        data = asdict(self)
        data["layer_sizes"] = list(self.layer_sizes)
        data["frozen_sites"] = list(self.frozen_sites)
        return data


_ADAPTER = TypeAdapter(FitConfig)


def load_config(path) -> FitConfig:
    """Read a JSON config file."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return FitConfig.from_dict(data)
