"""Trial observation files.

A trial is a pair of files sharing a stem:

    <trial>.meta.json   frame count, joint names, camera names, frame rate, units
    <trial>.kpts.f32    little-endian float32, row-major (T, J, C, 3) of
                        (x_px, y_px, confidence)

A reference walkway for the trial, when there is one, sits next to them
as ``<trial>.walkway.json``.
"""

import json
import logging
from pathlib import Path

import numpy as np

from .exceptions import TrialFormatError
from .objective import TrialObservations

logger = logging.getLogger(__name__)

META_SUFFIX = ".meta.json"
KPTS_SUFFIX = ".kpts.f32"
WALKWAY_SUFFIX = ".walkway.json"
KPTS_DTYPE = np.dtype("<f4")


def trial_stem(path) -> Path:
    """``dir/walk1.meta.json`` or ``dir/walk1.kpts.f32`` or ``dir/walk1`` -> ``dir/walk1``."""
    path = Path(path)
    for suffix in (META_SUFFIX, KPTS_SUFFIX):
        if path.name.endswith(suffix):
            return path.with_name(path.name[: -len(suffix)])
    return path


def find_trials(directory) -> list[Path]:
    """Trial stems in a directory, sorted by name."""
    return sorted(trial_stem(p) for p in Path(directory).glob(f"*{META_SUFFIX}"))


def read_trial(path) -> TrialObservations:
    stem = trial_stem(path)
    meta_path = stem.with_name(stem.name + META_SUFFIX)
    kpts_path = stem.with_name(stem.name + KPTS_SUFFIX)
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise TrialFormatError("metadata file not found", str(meta_path)) from None
    except json.JSONDecodeError as e:
        raise TrialFormatError(f"invalid JSON ({e.msg} at line {e.lineno})", str(meta_path)) from None

    try:
        n_frames = int(meta["n_frames"])
        joints = tuple(meta["joint_names"])
        cameras = tuple(meta["camera_names"])
        fps = float(meta["fps"])
    except (KeyError, TypeError, ValueError) as e:
        raise TrialFormatError(f"missing or invalid field {e}", str(meta_path)) from None
    if n_frames < 1 or fps <= 0 or not joints or not cameras:
        raise TrialFormatError("frame count, frame rate, joints and cameras must be positive", str(meta_path))
    if meta.get("units", "px") != "px":
        raise TrialFormatError(f"unsupported keypoint units '{meta['units']}'", str(meta_path))

    expected = n_frames * len(joints) * len(cameras) * 3 * KPTS_DTYPE.itemsize
    try:
        raw = kpts_path.read_bytes()
    except FileNotFoundError:
        raise TrialFormatError("keypoint file not found", str(kpts_path), expected) from None
    if len(raw) != expected:
        raise TrialFormatError(
            f"expected {expected} bytes for {n_frames}x{len(joints)}x{len(cameras)}x3 float32, got {len(raw)}",
            str(kpts_path), expected,
        )
    data = np.frombuffer(raw, dtype=KPTS_DTYPE).reshape(n_frames, len(joints), len(cameras), 3)
    data = data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise TrialFormatError("keypoint file contains non-finite values", str(kpts_path), expected)

    try:
        trial = TrialObservations(
            name=meta.get("name", stem.name),
            times=np.arange(n_frames) / fps,
            keypoints=data[..., :2],
            confidences=data[..., 2],
            camera_names=cameras,
            joint_names=joints,
            fps=fps,
            tag=str(meta.get("tag", "all")),
        )
    except ValueError as e:
        raise TrialFormatError(str(e), str(kpts_path), expected) from None
    logger.debug("read trial %s: %d frames, %d joints, %d cameras", trial.name, n_frames, len(joints), len(cameras))
    return trial


def write_trial(trial: TrialObservations, directory) -> Path:
    """Write the file pair for ``trial`` into ``directory`` and return the stem."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / trial.name
    meta = {
        "name": trial.name,
        "n_frames": trial.n_frames,
        "joint_names": list(trial.joint_names),
        "camera_names": list(trial.camera_names),
        "fps": trial.fps,
        "units": "px",
        "tag": trial.tag,
    }
    stem.with_name(stem.name + META_SUFFIX).write_text(json.dumps(meta, indent=2) + "\n")
    packed = np.concatenate([trial.keypoints, trial.confidences[..., None]], axis=-1)
    stem.with_name(stem.name + KPTS_SUFFIX).write_bytes(packed.astype(KPTS_DTYPE).tobytes())
    return stem
