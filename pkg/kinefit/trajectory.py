"""Implicit trajectories: time -> pose through a positional encoding and an MLP.

    t --encode_time--> features --MLP (GELU)--> raw --squash_to_limits--> pose
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ShapeError
from .kinematics import squash_to_limits
from .model import SkeletonModel

DEFAULT_ENCODING_DIM = 29
# keeps initial poses near the joint-range midpoints
OUTPUT_INIT_SCALE = 0.01


@dataclass(frozen=True)
class EncodingConfig:
    dim: int = DEFAULT_ENCODING_DIM
    t_max: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("encoding dim must be at least 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")

    @classmethod
    def for_trial(cls, n_frames: int, fps: float, dim: int = DEFAULT_ENCODING_DIM) -> "EncodingConfig":
        """Encoding spanning a trial of ``n_frames`` sampled at ``fps``."""
        return cls(dim=dim, t_max=max((n_frames - 1) / fps, 1.0 / fps))


@dataclass
class ImplicitTrajectory:
    """MLP parameters phi. ``weights[k]`` has shape ``(fan_in, fan_out)``."""
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("trajectory needs one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise ShapeError(f"layer {k} input {w.shape[0]} does not chain from {self.weights[k - 1].shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    @property
    def n_params(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def params(self, prefix: str = "") -> dict[str, np.ndarray]:
        """Flat parameter blocks named ``{prefix}w{k}`` / ``{prefix}b{k}``."""
        blocks = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            blocks[f"{prefix}w{k}"] = w
            blocks[f"{prefix}b{k}"] = b
        return blocks

    @classmethod
    def from_params(cls, blocks: dict, prefix: str = "") -> "ImplicitTrajectory":
        n_layers = sum(1 for key in blocks if key.startswith(f"{prefix}w"))
        return cls(
            [np.asarray(blocks[f"{prefix}w{k}"]) for k in range(n_layers)],
            [np.asarray(blocks[f"{prefix}b{k}"]) for k in range(n_layers)],
        )

    def to_dict(self) -> dict:
        return {
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImplicitTrajectory":
        return cls(
            [np.asarray(w, dtype=np.float64) for w in data["weights"]],
            [np.asarray(b, dtype=np.float64) for b in data["biases"]],
        )


def encode_time(t, cfg: EncodingConfig) -> np.ndarray:
    """
    Sinusoidal features of scaled time ``s = pi * t / t_max``.

    Layout is ``[s, sin(s), cos(s), sin(2s), cos(2s), sin(4s), ...]`` cut to
    exactly ``cfg.dim`` entries. Scalars give ``(dim,)``, arrays ``(B, dim)``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    tol = 1e-12 * cfg.t_max
    if np.any(t_arr < -tol) or np.any(t_arr > cfg.t_max + tol) or not np.all(np.isfinite(t_arr)):
        raise ValueError(f"time outside [0, {cfg.t_max}]")
    s = np.pi * np.clip(t_arr, 0.0, cfg.t_max) / cfg.t_max
    features = [s]
    k = 0
    while len(features) < cfg.dim:
        arg = (2.0 ** k) * s
        features.append(np.sin(arg))
        features.append(np.cos(arg))
        k += 1
    return np.stack(features[:cfg.dim], axis=-1)


def mlp_forward(weights, biases, features):
    """GELU MLP with a linear output layer. Works on plain or traced blocks."""
    h = features
    last = len(weights) - 1
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = ad.matmul(h, w) + b
        if k < last:
            h = ad.gelu(h)
    return h


def trajectory_pose(weights, biases, features, model: SkeletonModel):
    """Poses ``(B, n_dof)`` for a ``(B, dim)`` feature batch."""
    return squash_to_limits(mlp_forward(weights, biases, features), model)


def eval_trajectory(traj: ImplicitTrajectory, cfg: EncodingConfig, model: SkeletonModel, t) -> np.ndarray:
    """Pose at time ``t`` (scalar -> ``(n_dof,)``, array -> ``(B, n_dof)``)."""
    if traj.input_dim != cfg.dim:
        raise ShapeError(f"trajectory expects {traj.input_dim} features, encoding gives {cfg.dim}")
    if traj.output_dim != model.n_dof:
        raise ShapeError(f"trajectory outputs {traj.output_dim} values, model has {model.n_dof} DoF")
    features = encode_time(t, cfg)
    single = features.ndim == 1
    poses = trajectory_pose(traj.weights, traj.biases, np.atleast_2d(features), model)
    return poses[0] if single else poses


def init_trajectory(seed: int, cfg: EncodingConfig, layer_sizes, n_dof: int) -> ImplicitTrajectory:
    """
    Fresh MLP parameters.

    Every weight and bias is drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    with ``numpy.random.default_rng(seed)``; the output layer is then
    multiplied by 0.01.
    """
    sizes = [cfg.dim, *[int(n) for n in layer_sizes], int(n_dof)]
    if any(n < 1 for n in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    weights[-1] *= OUTPUT_INIT_SCALE
    biases[-1] *= OUTPUT_INIT_SCALE
    return ImplicitTrajectory(weights, biases)
