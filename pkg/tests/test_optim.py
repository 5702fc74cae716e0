import numpy as np
import pytest

from kinefit.config import FitConfig
from kinefit.exceptions import ShapeError
from kinefit.fitter import sample_timepoints
from kinefit.objective import TrialObservations
from kinefit.optim import AdamState, adamw_step, learning_rate_at


@pytest.fixture
def schedule():
    return FitConfig(steps=3000, lr_start=1e-4, lr_end=1e-7)


def _trial(n_frames):
    return TrialObservations(
        "t", np.arange(n_frames) / 30.0, np.zeros((n_frames, 1, 1, 2)), np.ones((n_frames, 1, 1)), ("a",)
    )


def test_learning_rate_endpoints(schedule):
    assert learning_rate_at(0, schedule) == pytest.approx(1e-4)
    assert learning_rate_at(3000, schedule) == 1e-7
    assert learning_rate_at(1000, schedule) == pytest.approx(1e-5)


def test_learning_rate_is_monotone(schedule):
    rates = [learning_rate_at(s, schedule) for s in range(0, 3001, 100)]
    assert np.all(np.diff(rates) < 0)


def test_learning_rate_out_of_range(schedule):
    with pytest.raises(ValueError):
        learning_rate_at(3001, schedule)
    with pytest.raises(ValueError):
        learning_rate_at(-1, schedule)


def test_first_adam_step_is_unit_sized():
    config = FitConfig(weight_decay=0.0)
    params = {"x": np.array([0.0])}
    new, state = adamw_step(params, {"x": np.array([1.0])}, AdamState.zeros(params), 0.1, config)
    assert new["x"][0] == pytest.approx(-0.1)
    assert state.step == 1


def test_zero_gradient_without_decay_is_identity():
    config = FitConfig(weight_decay=0.0)
    params = {"x": np.array([0.3, -2.0])}
    new, _ = adamw_step(params, {"x": np.zeros(2)}, AdamState.zeros(params), 0.1, config)
    np.testing.assert_array_equal(new["x"], params["x"])


def test_decoupled_decay_shrinks_parameters():
    config = FitConfig(weight_decay=1e-5)
    params = {"x": np.array([0.3, -2.0])}
    new, _ = adamw_step(params, {"x": np.zeros(2)}, AdamState.zeros(params), 0.1, config)
    np.testing.assert_allclose(new["x"], params["x"] * (1.0 - 0.1 * 1e-5), rtol=1e-14)


def test_decay_only_named_blocks():
    config = FitConfig(weight_decay=0.1)
    params = {"w0": np.ones(2), "scales": np.ones(2)}
    grads = {"w0": np.zeros(2), "scales": np.zeros(2)}
    new, _ = adamw_step(params, grads, AdamState.zeros(params), 0.5, config, decay={"w0"})
    np.testing.assert_allclose(new["w0"], 0.95)
    np.testing.assert_array_equal(new["scales"], 1.0)


def test_weight_decay_override():
    config = FitConfig(weight_decay=0.1)
    params = {"d": np.ones(3)}
    new, _ = adamw_step(params, {"d": np.zeros(3)}, AdamState.zeros(params), 0.5, config, weight_decay=0.0)
    np.testing.assert_array_equal(new["d"], 1.0)


def test_non_finite_gradient_skips_step():
    config = FitConfig()
    params = {"x": np.array([1.0, 2.0])}
    state = AdamState.zeros(params)
    new, state = adamw_step(params, {"x": np.array([np.nan, 1.0])}, state, 0.1, config)
    np.testing.assert_array_equal(new["x"], params["x"])
    assert state.skipped == 1
    assert state.step == 0
    np.testing.assert_array_equal(state.m["x"], 0.0)


def test_gradient_blocks_must_match():
    config = FitConfig()
    params = {"x": np.zeros(2)}
    with pytest.raises(ShapeError):
        adamw_step(params, {"y": np.zeros(2)}, AdamState.zeros(params), 0.1, config)
    with pytest.raises(ShapeError):
        adamw_step(params, {"x": np.zeros(3)}, AdamState.zeros(params), 0.1, config)


def test_adam_converges_on_quadratic():
    config = FitConfig(weight_decay=0.0)
    params = {"x": np.array([5.0, -3.0])}
    state = AdamState.zeros(params)
    for _ in range(2000):
        params, state = adamw_step(params, {"x": 2.0 * (params["x"] - 1.0)}, state, 0.01, config)
    np.testing.assert_allclose(params["x"], 1.0, atol=5e-2)


def test_single_frame_trial_samples_index_zero():
    frames = sample_timepoints(_trial(1), 300, np.random.default_rng(0))
    assert frames.shape == (300,)
    np.testing.assert_array_equal(frames, 0)


def test_sampling_is_deterministic():
    trial = _trial(50)
    a = sample_timepoints(trial, 300, np.random.default_rng(11))
    b = sample_timepoints(trial, 300, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_sampling_is_uniform():
    frames = sample_timepoints(_trial(10), 100_000, np.random.default_rng(5))
    counts = np.bincount(frames, minlength=10)
    sigma = np.sqrt(100_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 10_000) < 4 * sigma)


def test_sampling_rejects_bad_count():
    with pytest.raises(ValueError):
        sample_timepoints(_trial(5), 0, np.random.default_rng(0))
