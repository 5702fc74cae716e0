"""Session fitting and population (base-site) fitting.

A session fit jointly optimizes one trajectory network per trial plus the
subject's shared scales and site offsets. From ``ba_start_step`` on, the
camera extrinsic deltas join in with their own Adam optimizer. Camera 0
anchors the gauge and never moves.

Each iteration samples timepoints for every trial, evaluates trials on
independent tapes (concurrently when allowed) and combines the results in
trial order, so a fixed seed reproduces a fit exactly.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import CameraRig, ExtrinsicDelta, delta_report, rig_to_json
from .config import FitConfig
from .exceptions import DivergenceError, NonFiniteError, ShapeError
from .fitlog import FitLog
from .kinematics import marker_positions
from .model import SkeletonModel, SubjectParams
from .objective import (
    LossComponents,
    LossWeights,
    TrialObservations,
    constraint_loss,
    offset_regularization,
    reprojection_loss,
    total_loss,
)
from .optim import AdamState, adamw_step, learning_rate_at
from .trajectory import EncodingConfig, ImplicitTrajectory, encode_time, eval_trajectory, init_trajectory, trajectory_pose

logger = logging.getLogger(__name__)

SHARED_BLOCKS = ("scales", "offsets", "camera_deltas", "base_sites")
MIN_SCALE = 0.05


def sample_timepoints(trial: TrialObservations, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` frame indices drawn uniformly with replacement."""
    if trial.n_frames < 1:
        raise ValueError(f"{trial.name}: cannot sample an empty trial")
    if count < 1:
        raise ValueError("sample count must be at least 1")
    return rng.integers(0, trial.n_frames, size=count)


def trial_loss(p, model: SkeletonModel, rig: CameraRig, batch, features, weights: LossWeights, n_layers: int):
    """
    ``L_reproj + lambda_eps * L_eps`` of one trial's sampled frames.

    ``p`` holds the trial's ``w{k}``/``b{k}`` blocks, ``scales`` and
    ``offsets``, and optionally ``camera_deltas`` and ``base_sites``.
    Returns ``(loss, {"l_reproj", "l_eps"})``.
    """
    pose = trajectory_pose(
        [p[f"w{k}"] for k in range(n_layers)],
        [p[f"b{k}"] for k in range(n_layers)],
        features, model,
    )
    markers = marker_positions(model, pose, p["scales"], p["offsets"], p.get("base_sites"))
    l_reproj = reprojection_loss(markers, batch, rig, p.get("camera_deltas"), weights.huber_delta)
    if not model.constraints:
        return l_reproj, {"l_reproj": l_reproj, "l_eps": 0.0}
    l_eps = constraint_loss(model, pose)
    return l_reproj + weights.lambda_eps * l_eps, {"l_reproj": l_reproj, "l_eps": l_eps}


@dataclass
class SessionFit:
    """Fitted trajectories, the shared subject parameters and camera deltas."""
    trajectories: list[ImplicitTrajectory]
    encodings: list[EncodingConfig]
    trial_names: list[str]
    frame_times: list[np.ndarray]
    subject: SubjectParams
    camera_deltas: np.ndarray
    rig: CameraRig
    fit_log: FitLog
    iterations: int = 0

    @property
    def deltas(self) -> list[ExtrinsicDelta]:
        return [ExtrinsicDelta.from_vector(d) for d in self.camera_deltas]

    def refined_rig(self) -> CameraRig:
        return self.rig.with_deltas(self.camera_deltas)

    def poses(self, model: SkeletonModel, index: int) -> np.ndarray:
        """Squashed pose ``(T, n_dof)`` at every native frame of trial ``index``."""
        return eval_trajectory(self.trajectories[index], self.encodings[index], model, self.frame_times[index])

    def markers(self, model: SkeletonModel, index: int) -> np.ndarray:
        """Fitted marker positions ``(T, J, 3)`` for trial ``index``."""
        return marker_positions(model, self.poses(model, index), self.subject.scales, self.subject.site_offsets)


class _SessionState:
    """Parameters, optimizer moments and sampling stream of one subject."""

    def __init__(
        self,
        model: SkeletonModel,
        rig: CameraRig,
        trials: list[TrialObservations],
        config: FitConfig,
        name: str = "session",
        seed: int | None = None,
    ):
        if not trials:
            raise ValueError("a session needs at least one trial")
        names = [t.name for t in trials]
        if len(set(names)) != len(names):
            raise ValueError(f"trial names must be unique, got {names}")
        for trial in trials:
            trial.check_model(model)
            for cam in trial.camera_names:
                if cam not in rig.names:
                    raise ShapeError(f"{trial.name}: camera '{cam}' is not in the rig")

        seed = config.seed if seed is None else seed
        self.model = model
        self.rig = rig
        self.trials = trials
        self.config = config
        self.weights = config.loss_weights
        self.has_constraints = bool(model.constraints)
        self.encodings = [EncodingConfig.for_trial(t.n_frames, t.fps, config.encoding_dim) for t in trials]
        self.features = [encode_time(t.times, enc) for t, enc in zip(trials, self.encodings)]
        self.n_layers = len(config.layer_sizes) + 1

        self.params: dict[str, np.ndarray] = {}
        for n, enc in enumerate(self.encodings):
            traj = init_trajectory(seed + n, enc, config.layer_sizes, model.n_dof)
            self.params.update(traj.params(f"traj{n}."))
        neutral = SubjectParams.neutral(model)
        self.params["scales"] = neutral.scales
        self.params["offsets"] = neutral.site_offsets
        self.decay = {k for k in self.params if k.startswith("traj")} | {"offsets"}
        self.camera_deltas = np.zeros((len(rig), 6))

        self.adam = AdamState()
        self.ba_adam = AdamState()
        self.rng = np.random.default_rng([seed, len(trials)])
        self.log = FitLog(name, config.log_every)
        self.nonfinite = 0
        self.last_finite: float | None = None

    def _trial_gradients(self, n: int, frames: np.ndarray, ba_active: bool, base_sites):
        prefix = f"traj{n}."
        inputs = {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}
        inputs["scales"] = self.params["scales"]
        inputs["offsets"] = self.params["offsets"]
        if ba_active:
            inputs["camera_deltas"] = self.camera_deltas
        if base_sites is not None:
            inputs["base_sites"] = base_sites
        batch = self.trials[n].subset(frames)
        features = self.features[n][frames]

        def program(p):
            return trial_loss(p, self.model, self.rig, batch, features, self.weights, self.n_layers)

        return ad.evaluate_with_gradients(program, inputs)

    def evaluate(self, ba_active: bool, executor=None, base_sites=None):
        """
        Loss components and gradients of one iteration.

        Returns ``(components, grads)``, or ``(None, None)`` when the loss or
        its gradient is not finite.
        """
        batch = self.config.batch_timepoints
        frames = [sample_timepoints(t, batch, self.rng) for t in self.trials]

        def run(n):
            try:
                return self._trial_gradients(n, frames[n], ba_active, base_sites)
            except NonFiniteError as e:
                logger.warning("%s trial %s: %s", self.log.name, self.trials[n].name, e)
                return None

        indices = range(len(self.trials))
        results = list(executor.map(run, indices) if executor is not None else map(run, indices))
        if any(r is None for r in results):
            return None, None

        grads: dict[str, np.ndarray] = {}
        l_reproj = l_eps = 0.0
        for n, result in enumerate(results):
            l_reproj += float(result.aux["l_reproj"])
            l_eps += float(result.aux["l_eps"])
            for key, g in result.grads.items():
                name = key if key in SHARED_BLOCKS else f"traj{n}.{key}"
                grads[name] = g if name not in grads else grads[name] + g

        offsets = self.params["offsets"]
        l_beta = float(offset_regularization(offsets))
        grads["offsets"] = grads["offsets"] + self.weights.lambda_beta * 2.0 * offsets / offsets.size
        components = LossComponents(l_reproj, l_beta, l_eps, self.has_constraints)
        total = float(total_loss(components, self.weights))
        if not np.isfinite(total):
            return None, None
        components.extra["total"] = total
        return components, grads

    def apply(self, grads: dict[str, np.ndarray], lr: float, ba_active: bool) -> None:
        main = {k: grads[k] for k in self.params}
        self.params, _ = adamw_step(self.params, main, self.adam, lr, self.config, decay=self.decay)
        self.params["scales"] = np.maximum(self.params["scales"], MIN_SCALE)
        if ba_active and "camera_deltas" in grads:
            g = grads["camera_deltas"].copy()
            g[0] = 0.0
            updated, _ = adamw_step(
                {"camera_deltas": self.camera_deltas}, {"camera_deltas": g},
                self.ba_adam, self.config.ba_lr, self.config, weight_decay=0.0,
            )
            self.camera_deltas = updated["camera_deltas"]
            self.camera_deltas[0] = 0.0

    def step(self, iteration: int, lr: float, ba_active: bool, executor=None, base_sites=None):
        """Evaluate, update and log one iteration. Returns the gradients, or None when skipped."""
        components, grads = self.evaluate(ba_active, executor, base_sites)
        if components is None:
            self.nonfinite += 1
            self.log.track(iteration, np.nan, np.nan, np.nan, np.nan, lr, ba_active, skipped=True)
            logger.warning("%s iter %d: non-finite loss, step skipped", self.log.name, iteration)
            if self.nonfinite > self.config.max_nonfinite:
                raise DivergenceError(
                    f"loss non-finite for {self.nonfinite} consecutive iterations",
                    iteration, self.snapshot(iteration, lr),
                )
            return None
        self.nonfinite = 0
        total = components.extra["total"]
        self.last_finite = total
        self.log.track(iteration, components.l_reproj, components.l_beta, components.l_eps, total, lr, ba_active)
        self.apply(grads, lr, ba_active)
        return grads

    def snapshot(self, iteration: int, lr: float) -> dict:
        return {
            "iteration": iteration,
            "lr": lr,
            "last_finite_loss": self.last_finite,
            "scales": self.params["scales"].tolist(),
            "max_abs": {k: float(np.max(np.abs(v))) for k, v in self.params.items()},
            "camera_deltas": self.camera_deltas.tolist(),
        }

    def result(self, iterations: int) -> SessionFit:
        trajectories = [
            ImplicitTrajectory.from_params(self.params, f"traj{n}.") for n in range(len(self.trials))
        ]
        return SessionFit(
            trajectories=trajectories,
            encodings=list(self.encodings),
            trial_names=[t.name for t in self.trials],
            frame_times=[t.times.copy() for t in self.trials],
            subject=SubjectParams(self.params["scales"].copy(), self.params["offsets"].copy()),
            camera_deltas=self.camera_deltas.copy(),
            rig=self.rig,
            fit_log=self.log,
            iterations=iterations,
        )


def _iterations(config: FitConfig, max_iterations: int | None) -> int:
    return config.steps if max_iterations is None else min(int(max_iterations), config.steps)


def _ba_active(config: FitConfig, step: int, rig: CameraRig) -> bool:
    return config.bundle_adjust and len(rig) > 1 and step >= config.ba_start_step


def _executor(config: FitConfig, n_tasks: int):
    workers = min(config.workers, n_tasks)
    return ThreadPoolExecutor(max_workers=workers) if workers > 1 else None


def fit_session(
    model: SkeletonModel,
    rig: CameraRig,
    trials: list[TrialObservations],
    config: FitConfig,
    max_iterations: int | None = None,
) -> SessionFit:
    """
    Fit one subject's trials jointly.

    Args:
        model: Skeleton whose sites match the keypoint order of every trial.
        rig: Initial calibration; every trial's cameras must be in it.
        trials: Observations, one trajectory network each.
        config: Hyperparameters.
        max_iterations: Stop early after this many iterations of the schedule.

    Returns:
        SessionFit with trajectories, shared subject parameters and deltas.

    Raises:
        DivergenceError: the loss stayed non-finite for too long.
    """
    state = _SessionState(model, rig, trials, config)
    n_iter = _iterations(config, max_iterations)
    logger.info(
        "fitting %d trial(s), %d DoF, %d sites, %d camera(s), %d iterations",
        len(trials), model.n_dof, model.n_sites, len(rig), n_iter,
    )
    executor = _executor(config, len(trials))
    try:
        for step in range(n_iter):
            ba_active = _ba_active(config, step, rig)
            if ba_active and step == config.ba_start_step:
                logger.info("bundle adjustment enabled at iteration %d (lr %g)", step, config.ba_lr)
            state.step(step, learning_rate_at(step, config), ba_active, executor)
    finally:
        if executor is not None:
            executor.shutdown()
    fit = state.result(n_iter)
    if fit.fit_log.last is not None:
        logger.info("fit done: total loss %.6g -> %.6g", fit.fit_log.first.total, fit.fit_log.last.total)
    return fit


@dataclass
class MetaFit:
    """Population fit: updated base model plus one session fit per subject."""
    model: SkeletonModel
    fits: list[SessionFit]
    frozen_sites: tuple[str, ...]
    fit_log: FitLog = field(default_factory=lambda: FitLog("meta"))


def meta_fit(
    model: SkeletonModel,
    sessions: list[tuple[CameraRig, list[TrialObservations]]],
    config: FitConfig,
    frozen_sites=None,
    max_iterations: int | None = None,
) -> MetaFit:
    """
    Learn base site positions shared by several subjects.

    Every subject keeps its own trajectories, scales and regularized offsets;
    the base sites are one extra parameter block shared by all of them, so a
    displacement common to the population moves into the base model. Each
    iteration visits ``config.subjects_per_batch`` subjects in round-robin
    order and accumulates their base-site gradients into a single update.
    Frozen sites keep their base positions exactly.
    """
    if len(sessions) < 2:
        raise ValueError(f"meta fitting needs at least two subjects, got {len(sessions)}")
    frozen = tuple(config.frozen_sites if frozen_sites is None else frozen_sites)
    for name in frozen:
        if name not in model.site_names:
            raise ValueError(f"frozen site '{name}' is not in the model")
    frozen_mask = np.array([name in frozen for name in model.site_names])

    states = [
        _SessionState(model, rig, trials, config, name=f"subject{s}", seed=config.seed + 1000 * s)
        for s, (rig, trials) in enumerate(sessions)
    ]
    base = model.site_positions.copy()
    base_adam = AdamState()
    meta_log = FitLog("meta", config.log_every)
    per_batch = min(config.subjects_per_batch, len(states))
    n_iter = _iterations(config, max_iterations)
    logger.info("meta fitting %d subjects, %d per iteration, %d frozen site(s)", len(states), per_batch, len(frozen))

    max_trials = max(len(s.trials) for s in states)
    executor = _executor(config, max_trials)
    try:
        for step in range(n_iter):
            lr = learning_rate_at(step, config)
            accumulated = np.zeros_like(base)
            totals = np.zeros(4)
            for i in range(per_batch):
                state = states[(step * per_batch + i) % len(states)]
                ba_active = _ba_active(config, step, state.rig)
                grads = state.step(step, lr, ba_active, executor, base_sites=base)
                if grads is None:
                    continue
                accumulated += grads["base_sites"]
                r = state.log.last
                totals += (r.l_reproj, r.l_beta, r.l_eps, r.total)
            meta_log.track(step, *totals, lr)
            updated, _ = adamw_step({"base_sites": base}, {"base_sites": accumulated}, base_adam, lr, config, weight_decay=0.0)
            base = np.where(frozen_mask[:, None], base, updated["base_sites"])
    finally:
        if executor is not None:
            executor.shutdown()

    fitted_model = model.with_site_positions(base)
    return MetaFit(fitted_model, [s.result(n_iter) for s in states], frozen, meta_log)


# --- result files ---

def fit_summary(fit: SessionFit, model: SkeletonModel, trials: list[TrialObservations]) -> list[dict]:
    """Per-trial residual and GC_5 against the refined rig."""
    from .metrics import geometric_consistency, mean_residual

    refined = fit.refined_rig()
    summary = []
    for n, trial in enumerate(trials):
        markers = fit.markers(model, n)
        summary.append({
            "trial": trial.name,
            "mean_residual_px": mean_residual(markers, trial, refined),
            "gc5": geometric_consistency(markers, trial, refined, d=5.0),
        })
    return summary


def trial_result(fit: SessionFit, model: SkeletonModel, index: int, metrics: dict | None = None) -> dict:
    poses = fit.poses(model, index)
    return {
        "trial": fit.trial_names[index],
        "iterations": fit.iterations,
        "dof_names": list(model.dof_names),
        "times": fit.frame_times[index].tolist(),
        "poses": poses.tolist(),
        "subject": fit.subject.to_dict(model),
        "camera_deltas": {name: d.tolist() for name, d in zip(fit.rig.names, fit.camera_deltas)},
        "metrics": metrics or {},
    }


def write_session(fit: SessionFit, model: SkeletonModel, trials: list[TrialObservations], out_dir) -> list[Path]:
    """Write ``<trial>.fit.json`` per trial plus the session-level files. Returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for n, summary in enumerate(fit_summary(fit, model, trials)):
        path = out / f"{fit.trial_names[n]}.fit.json"
        path.write_text(json.dumps(trial_result(fit, model, n, summary), indent=1) + "\n")
        written.append(path)

    log_path = out / "fit_log.csv"
    fit.fit_log.write_csv(log_path)
    rig_path = out / "rig.refined.json"
    rig_path.write_text(rig_to_json(fit.refined_rig()) + "\n")
    deltas_path = out / "camera_deltas.json"
    deltas_path.write_text(json.dumps(delta_report(fit.rig, fit.camera_deltas), indent=2) + "\n")
    subject_path = out / "subject.json"
    subject_path.write_text(json.dumps(fit.subject.to_dict(model), indent=2) + "\n")
    written += [log_path, rig_path, deltas_path, subject_path]
    return written


def read_trial_result(path, model: SkeletonModel) -> tuple[np.ndarray, np.ndarray, SubjectParams]:
    """``(times, poses, subject)`` from a ``<trial>.fit.json`` file."""
    data = json.loads(Path(path).read_text())
    if list(data["dof_names"]) != list(model.dof_names):
        raise ShapeError(f"{path}: fitted DoF names do not match the model")
    times = np.asarray(data["times"], dtype=np.float64)
    poses = np.asarray(data["poses"], dtype=np.float64).reshape(len(times), model.n_dof)
    return times, poses, SubjectParams.from_dict(model, data["subject"])
