import json

import numpy as np
import pytest

from kinefit.exceptions import TrialFormatError
from kinefit.objective import TrialObservations
from kinefit.trials import KPTS_SUFFIX, META_SUFFIX, find_trials, read_trial, trial_stem, write_trial


@pytest.fixture
def trial(rng):
    return TrialObservations(
        name="walk1",
        times=np.arange(4) / 50.0,
        keypoints=rng.uniform(0, 1000, size=(4, 3, 2, 2)).astype(np.float32).astype(np.float64),
        confidences=np.full((4, 3, 2), 0.75),
        camera_names=("c0", "c1"),
        joint_names=("a", "b", "c"),
        fps=50.0,
    )


def test_write_then_read(tmp_path, trial):
    stem = write_trial(trial, tmp_path)
    assert stem == tmp_path / "walk1"
    loaded = read_trial(stem)
    np.testing.assert_array_equal(loaded.keypoints, trial.keypoints)
    np.testing.assert_array_equal(loaded.confidences, trial.confidences)
    np.testing.assert_allclose(loaded.times, trial.times)
    assert loaded.camera_names == ("c0", "c1")
    assert loaded.joint_names == ("a", "b", "c")


def test_stem_accepts_either_file(tmp_path):
    assert trial_stem(tmp_path / f"w{META_SUFFIX}") == tmp_path / "w"
    assert trial_stem(tmp_path / f"w{KPTS_SUFFIX}") == tmp_path / "w"
    assert trial_stem(tmp_path / "w") == tmp_path / "w"


def test_find_trials_sorted(tmp_path, trial):
    for name in ("walk2", "walk1"):
        trial.name = name
        write_trial(trial, tmp_path)
    assert [p.name for p in find_trials(tmp_path)] == ["walk1", "walk2"]


def test_truncated_keypoints_report_expected_size(tmp_path, trial):
    stem = write_trial(trial, tmp_path)
    kpts = stem.with_name(stem.name + KPTS_SUFFIX)
    kpts.write_bytes(kpts.read_bytes()[:-8])
    with pytest.raises(TrialFormatError) as exc:
        read_trial(stem)
    assert exc.value.expected_bytes == 4 * 3 * 2 * 3 * 4
    assert exc.value.path == str(kpts)


def test_missing_metadata(tmp_path):
    with pytest.raises(TrialFormatError, match="not found"):
        read_trial(tmp_path / "nothing")


def test_metadata_missing_field(tmp_path, trial):
    stem = write_trial(trial, tmp_path)
    meta_path = stem.with_name(stem.name + META_SUFFIX)
    meta = json.loads(meta_path.read_text())
    del meta["fps"]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(TrialFormatError):
        read_trial(stem)


def test_non_finite_keypoints(tmp_path, trial):
    trial.keypoints[1, 1, 1, 0] = np.nan
    stem = write_trial(trial, tmp_path)
    with pytest.raises(TrialFormatError, match="non-finite"):
        read_trial(stem)
