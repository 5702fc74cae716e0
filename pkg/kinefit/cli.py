"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 input or format error,
3 numerical failure. Commands that take ``--out`` write a
``manifest.json`` there on exit codes 0 and 3.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .camera import delta_report, load_rig, rig_from_json
from .config import FitConfig
from .exceptions import DivergenceError, MetricUndefinedError, NonFiniteError
from .fitter import fit_session, meta_fit, read_trial_result, write_session
from .gradcheck import run_gradcheck
from .kinematics import marker_positions
from .metrics import (
    GC_THRESHOLDS,
    align_trials,
    consistency_report,
    estimate_time_offset,
    heel_strikes,
    load_walkway,
    match_events,
    sigma_iqr,
    step_errors,
    step_parameters,
)
from .model import DEMO_MODELS, SkeletonModel, load_demo_model, load_model, serialize_model
from .objective import TrialObservations
from .synth import SynthConfig, generate_session, load_synth_config
from .synth import write_session as write_synth_session
from .trials import KPTS_SUFFIX, META_SUFFIX, WALKWAY_SUFFIX, find_trials, read_trial, trial_stem

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

MANIFEST_NAME = "manifest.json"
HEEL_SITES = {"right": "heel_r", "left": "heel_l"}
STEP_PARAMETERS = ("step_length", "stride_length", "step_width")
# step-error histogram bins, millimeters
HIST_EDGES_MM = np.arange(-50.0, 52.0, 2.0)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    """Provenance of one command run."""
    command: str
    argv: list[str]
    seed: int | None = None
    config_hash: str | None = None
    input_hashes: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    started: str = ""
    finished: str = ""
    exit_code: int | None = None
    outputs: list[str] = field(default_factory=list)

    def add_inputs(self, *paths) -> None:
        for path in paths:
            path = Path(path)
            if path.is_file():
                self.input_hashes[str(path)] = sha256_file(path)

    def write(self, out_dir) -> Path:
        """Write ``manifest.json`` through a temporary file and an atomic rename."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        target = out / MANIFEST_NAME
        tmp = out / f".{MANIFEST_NAME}.tmp"
        tmp.write_text(json.dumps(asdict(self), indent=2) + "\n")
        os.replace(tmp, target)
        return target


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def sha256_json(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_model(spec: str) -> SkeletonModel:
    """A model file path, or the name of a bundled demo model."""
    path = Path(spec)
    if not path.exists() and spec in DEMO_MODELS:
        return load_demo_model(spec)
    return load_model(path)


def _trial_files(stem: Path) -> list[Path]:
    return [stem.with_name(stem.name + META_SUFFIX), stem.with_name(stem.name + KPTS_SUFFIX)]


def _expand_trials(paths) -> list[Path]:
    """Trial stems from files, stems or directories of trial pairs."""
    stems = []
    for p in paths:
        p = Path(p)
        stems.extend(find_trials(p) if p.is_dir() else [trial_stem(p)])
    if not stems:
        raise FileNotFoundError("no trial files found")
    return stems


def _fit_config(args) -> FitConfig:
    if args.config:
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    else:
        data = {"preset": args.preset}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.no_ba:
        data["bundle_adjust"] = False
    if args.threads is not None:
        data["threads"] = args.threads
    return FitConfig.from_dict(data)


def fit_config_hash(config: FitConfig) -> str:
    """Hash of the resolved config; worker threads do not change results and are left out."""
    data = config.to_dict()
    data.pop("threads")
    return sha256_json(data)


def _write_divergence(err: DivergenceError, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "divergence.json"
    path.write_text(json.dumps({"iteration": err.iteration, "message": str(err), "snapshot": err.snapshot}, indent=2) + "\n")
    return path


# --- subcommands ---

def cmd_synth(args, manifest: RunManifest) -> int:
    model = _load_model(args.model)
    config = load_synth_config(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        config = SynthConfig.from_dict({**config.to_dict(), "seed": args.seed})
    manifest.seed = config.seed
    manifest.config_hash = sha256_json(config.to_dict())
    manifest.add_inputs(*(p for p in (args.config, args.model) if p))

    session = generate_session(config, model)
    out = Path(args.out)
    written = write_synth_session(session, model, out)
    model_path = out / "model.model"
    model_path.write_text(serialize_model(model))
    config_path = out / "synth_config.json"
    config_path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    manifest.outputs += [str(p) for p in [*written, model_path, config_path]]
    return EXIT_OK


def cmd_fit(args, manifest: RunManifest) -> int:
    model = _load_model(args.model)
    rig = load_rig(args.rig)
    config = _fit_config(args)
    stems = _expand_trials(args.trials)
    manifest.seed = config.seed
    manifest.config_hash = fit_config_hash(config)
    manifest.add_inputs(args.model, args.rig, *(p for s in stems for p in _trial_files(s)))
    if args.config:
        manifest.add_inputs(args.config)

    trials = [read_trial(s) for s in stems]
    out = Path(args.out)
    try:
        fit = fit_session(model, rig, trials, config, max_iterations=args.max_iterations)
    except DivergenceError as e:
        manifest.outputs.append(str(_write_divergence(e, out)))
        raise
    written = write_session(fit, model, trials, out)
    manifest.outputs += [str(p) for p in written]
    return EXIT_OK


def _read_subjects(path: Path) -> list[dict]:
    data = json.loads(path.read_text())
    subjects = data.get("subjects") if isinstance(data, dict) else None
    if not isinstance(subjects, list) or not subjects:
        raise ValueError(f"{path}: expected an object with a non-empty 'subjects' list")
    base = path.parent
    resolved = []
    for i, entry in enumerate(subjects):
        try:
            resolved.append({
                "name": str(entry.get("name", f"subject{i}")),
                "rig": base / entry["rig"],
                "trials": [base / t for t in entry["trials"]],
            })
        except (KeyError, TypeError, AttributeError):
            raise ValueError(f"{path}: subject {i} needs 'rig' and 'trials'") from None
    return resolved


def cmd_metafit(args, manifest: RunManifest) -> int:
    model = _load_model(args.model)
    config = _fit_config(args)
    subjects = _read_subjects(Path(args.subjects))
    manifest.seed = config.seed
    manifest.config_hash = fit_config_hash(config)
    manifest.add_inputs(args.model, args.subjects)

    sessions = []
    for subject in subjects:
        stems = _expand_trials(subject["trials"])
        manifest.add_inputs(subject["rig"], *(p for s in stems for p in _trial_files(s)))
        sessions.append((load_rig(subject["rig"]), [read_trial(s) for s in stems]))

    out = Path(args.out)
    frozen = args.frozen_sites.split(",") if args.frozen_sites is not None else None
    try:
        result = meta_fit(model, sessions, config, frozen_sites=frozen, max_iterations=args.max_iterations)
    except DivergenceError as e:
        manifest.outputs.append(str(_write_divergence(e, out)))
        raise

    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.fitted.model"
    model_path.write_text(serialize_model(result.model))
    log_path = out / "meta_log.csv"
    result.fit_log.write_csv(log_path)
    manifest.outputs += [str(model_path), str(log_path)]
    for subject, fit, (_, trials) in zip(subjects, result.fits, sessions):
        written = write_session(fit, result.model, trials, out / subject["name"])
        manifest.outputs += [str(p) for p in written]
    return EXIT_OK


def _heel_events(model: SkeletonModel, markers: np.ndarray, fps: float):
    indices = {side: model.site_index(name) for side, name in HEEL_SITES.items()}
    return heel_strikes({side: markers[:, j] for side, j in indices.items()}, fps)


def _aligned(reference, measured):
    """Measured strikes mapped into the reference frame by a fitted affine alignment."""
    pairs = match_events(reference, measured, offset=estimate_time_offset(reference, measured))
    a = np.array([[m.time, *m.position[:2]] for _, m in pairs]).reshape(-1, 3)
    b = np.array([[r.time, *r.position[:2]] for r, _ in pairs]).reshape(-1, 3)
    alignment = align_trials(a, b)
    for event in measured:
        event.position[:2] = alignment.apply(event.position[:2])
        event.time += alignment.time_offset
    return measured, alignment


def _observations_by_name(directory: Path) -> dict[str, tuple[Path, TrialObservations]]:
    """Trials of a directory keyed by their metadata name."""
    observed = {}
    for stem in find_trials(directory):
        trial = read_trial(stem)
        observed[trial.name] = (stem, trial)
    return observed


def cmd_metrics(args, manifest: RunManifest) -> int:
    model = _load_model(args.model)
    fits_dir = Path(args.fits)
    rig_path = Path(args.rig) if args.rig else fits_dir / "rig.refined.json"
    rig = load_rig(rig_path)
    fit_paths = sorted(fits_dir.glob("*.fit.json"))
    if not fit_paths:
        raise FileNotFoundError(f"no *.fit.json files in {fits_dir}")
    manifest.add_inputs(args.model, rig_path, *fit_paths)

    observed = _observations_by_name(Path(args.obs))
    reference_dir = args.reference is not None and Path(args.reference).is_dir()
    if args.reference and not reference_dir and len(fit_paths) > 1:
        raise ValueError(f"--reference {args.reference} is one walkway file but {fits_dir} holds {len(fit_paths)} fits")

    trials, markers_all = [], []
    per_trial: dict[str, dict] = {}
    errors_by_tag: dict[str, dict[str, list[float]]] = {}
    has_heels = all(name in model.site_names for name in HEEL_SITES.values())
    for path in fit_paths:
        name = path.name[: -len(".fit.json")]
        if name not in observed:
            raise FileNotFoundError(f"no observations named '{name}' in {args.obs}")
        stem, trial = observed[name]
        manifest.add_inputs(*_trial_files(stem))
        trial.check_model(model)
        _, poses, subject = read_trial_result(path, model)
        markers = marker_positions(model, poses, subject.scales, subject.site_offsets)
        trials.append(trial)
        markers_all.append(markers)

        entry: dict = {"tag": trial.tag}
        if has_heels:
            events = _heel_events(model, markers, trial.fps)
            if args.reference:
                walkway = Path(args.reference) / f"{stem.name}{WALKWAY_SUFFIX}" if reference_dir else Path(args.reference)
                manifest.add_inputs(walkway)
                reference = load_walkway(walkway)
                if args.align:
                    events, alignment = _aligned(reference, events)
                    entry["alignment"] = alignment.to_dict()
                errors = step_errors(step_parameters(reference), step_parameters(events))
                bucket = errors_by_tag.setdefault(trial.tag, {p: [] for p in STEP_PARAMETERS})
                for p in STEP_PARAMETERS:
                    bucket[p].extend((1000.0 * errors[p]).tolist())
                entry["step_errors_mm"] = {p: (1000.0 * errors[p]).tolist() for p in STEP_PARAMETERS}
            entry["steps"] = step_parameters(events).to_dict()
        per_trial[name] = entry

    report = consistency_report(markers_all, trials, rig, GC_THRESHOLDS, args.confidence_floor)
    spread = {}
    for tag, bucket in sorted(errors_by_tag.items()):
        spread[tag] = {}
        for p in STEP_PARAMETERS:
            try:
                spread[tag][p] = sigma_iqr(bucket[p])
            except MetricUndefinedError as e:
                logger.warning("tag %s, %s: %s", tag, p, e)
                spread[tag][p] = None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps({
        "geometric_consistency": report.to_dict(),
        "sigma_iqr_mm": spread,
        "trials": per_trial,
    }, indent=1) + "\n")
    csv_path = out / "metrics.csv"
    _write_metrics_csv(csv_path, report, errors_by_tag)
    manifest.outputs += [str(json_path), str(csv_path)]
    gc5 = report.at(5.0)
    logger.info("GC_5 %s over %d trial(s)", "undefined" if gc5 is None else f"{gc5:.3f}", len(trials))
    return EXIT_OK


def _write_metrics_csv(path: Path, report, errors_by_tag) -> None:
    """Long-format rows ``series,tag,parameter,x,value``: GC curves and step-error histograms."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["series", "tag", "parameter", "x", "value"])
        for series, values in (("gc_pooled", report.fractions), ("gc_trial_mean", report.per_trial_mean)):
            for d, q in zip(report.thresholds, values):
                writer.writerow([series, "all", "", d, "" if q is None else q])
        centers = 0.5 * (HIST_EDGES_MM[:-1] + HIST_EDGES_MM[1:])
        for tag, bucket in sorted(errors_by_tag.items()):
            for p in STEP_PARAMETERS:
                counts, _ = np.histogram(bucket[p], bins=HIST_EDGES_MM)
                for x, n in zip(centers, counts):
                    writer.writerow(["step_error_hist", tag, p, x, int(n)])


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    model = _load_model(args.model)
    seed = 0 if args.seed is None else args.seed
    manifest.seed = seed
    manifest.add_inputs(args.model)
    report = run_gradcheck(
        model,
        n_scenes=args.scenes,
        seed=seed,
        probes_per_block=args.probes or None,
        tolerance=args.tolerance,
    )
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "gradcheck.json"
        path.write_text(text)
        manifest.outputs.append(str(path))
    else:
        sys.stdout.write(text)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _model_summary(model: SkeletonModel) -> dict:
    return {
        "kind": "model",
        "bodies": model.n_bodies,
        "dof": model.n_dof,
        "sites": model.n_sites,
        "scales": list(model.scale_map.names),
        "constraints": len(model.constraints),
        "dof_names": list(model.dof_names),
    }


def cmd_inspect(args, manifest: RunManifest) -> int:
    target = args.target
    path = Path(target)
    if path.name.endswith((META_SUFFIX, KPTS_SUFFIX)) or (not path.exists() and path.with_name(path.name + META_SUFFIX).exists()):
        trial = read_trial(path)
        summary = {
            "kind": "trial",
            "name": trial.name,
            "frames": trial.n_frames,
            "fps": trial.fps,
            "joints": trial.n_joints,
            "cameras": list(trial.camera_names),
            "tag": trial.tag,
            "mean_confidence": float(trial.confidences.mean()),
        }
    elif path.suffix == ".json":
        rig = rig_from_json(path.read_text())
        summary = {
            "kind": "rig",
            "cameras": [
                {"name": cam.name, "center": cam.center.tolist(), "fx": cam.fx, "fy": cam.fy, "size": [cam.width, cam.height]}
                for cam in rig
            ],
            "deltas": delta_report(rig, np.zeros((len(rig), 6))),
        }
    else:
        summary = _model_summary(_load_model(target))
    sys.stdout.write(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


# --- parser ---

def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="Model file or demo model name")
    p.add_argument("--config", help="FitConfig JSON file")
    p.add_argument("--preset", default="desk", help="Preset used when no --config is given (default: desk)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--max-iterations", type=int, help="Stop after this many iterations of the schedule")
    p.add_argument("--no-ba", action="store_true", help="Disable bundle adjustment")
    p.add_argument("--threads", type=int, help="Trial worker threads (overrides KINEFIT_THREADS)")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kinefit", description="Multi-camera inverse kinematics with implicit trajectories.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-q", "--quiet", action="store_true", help="Only log warnings and errors")
    verbosity.add_argument("-v", "--verbose", action="store_true", help="Log debug messages")
    parser.add_argument("--seed", type=int, help="Seed for all randomness (overrides config files)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="Seed for all randomness")

    p = sub.add_parser("synth", parents=[seeded], help="Generate a synthetic walking session")
    p.add_argument("--model", required=True, help="Model file or demo model name")
    p.add_argument("--config", help="Synthetic session JSON config")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("fit", parents=[seeded], help="Fit one subject's trials")
    _add_fit_options(p)
    p.add_argument("--rig", required=True, help="Camera rig JSON")
    p.add_argument("--trials", required=True, nargs="+", help="Trial files, stems or directories")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("metafit", parents=[seeded], help="Learn base site positions across subjects")
    _add_fit_options(p)
    p.add_argument("--subjects", required=True, help="JSON manifest of subjects (rig and trials per subject)")
    p.add_argument("--frozen-sites", help="Comma-separated sites kept fixed (default: config frozen_sites)")
    p.set_defaults(handler=cmd_metafit)

    p = sub.add_parser("metrics", help="Geometric consistency and step-parameter errors of fitted trials")
    p.add_argument("--fits", required=True, help="Directory of <trial>.fit.json files")
    p.add_argument("--obs", required=True, help="Directory of trial observation files")
    p.add_argument("--model", required=True, help="Model file or demo model name")
    p.add_argument("--rig", help="Rig to project with (default: <fits>/rig.refined.json)")
    p.add_argument(
        "--reference",
        help="Walkway reference strikes: one <trial>.walkway.json file for a single fit, "
        "or a directory holding one per trial file stem",
    )
    p.add_argument("--align", action="store_true", help="Fit an affine alignment to the reference before comparing")
    p.add_argument("--confidence-floor", type=float, default=0.5)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("gradcheck", parents=[seeded], help="Compare loss gradients with finite differences")
    p.add_argument("--model", default="biped", help="Model file or demo model name (default: biped)")
    p.add_argument("--scenes", type=int, default=10, help="Random scenes to check")
    p.add_argument("--probes", type=int, default=8, help="Coordinates probed per block, 0 for all")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--out", help="Write gradcheck.json here instead of standard output")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("inspect", help="Summarize a model, rig or trial")
    p.add_argument("target", help="Model file or demo name, rig JSON, or trial file")
    p.set_defaults(handler=cmd_inspect)
    return parser


def configure_logging(quiet: bool = False, verbose: bool = False) -> None:
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def dispatch(argv=None) -> int:
    """Run one command and return its exit code."""
    parser = build_arg_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    configure_logging(args.quiet, args.verbose)

    manifest = RunManifest(command=args.command, argv=list(sys.argv[1:] if argv is None else argv), started=_now())
    out = getattr(args, "out", None)
    code = EXIT_INPUT
    try:
        code = args.handler(args, manifest)
    except (DivergenceError, NonFiniteError) as e:
        logger.error("numerical failure: %s", e)
        code = EXIT_NUMERIC
    except (OSError, ValueError, KeyError, TypeError) as e:
        logger.error("%s", e)
        return EXIT_INPUT
    if out and code in (EXIT_OK, EXIT_NUMERIC):
        manifest.finished = _now()
        manifest.exit_code = code
        manifest.write(out)
    return code


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
