import json

import numpy as np
import pytest

from kinefit.exceptions import DegenerateGeometryError, MetricUndefinedError
from kinefit.metrics import (
    HeelStrike,
    align_trials,
    consistency_fraction,
    consistency_report,
    detect_heel_strikes,
    estimate_time_offset,
    geometric_consistency,
    heel_strikes,
    load_walkway,
    match_events,
    mean_residual,
    sigma_iqr,
    step_errors,
    step_parameters,
)
from kinefit.objective import TrialObservations

ERRORS_PX = (1.0, 3.0, 6.0, 9.0)


def offset_trial(confidence=1.0):
    """Four on-axis markers whose keypoints sit 1, 3, 6 and 9 px to the right."""
    keypoints = np.zeros((1, 4, 1, 2))
    keypoints[0, :, 0, 0] = ERRORS_PX
    obs = TrialObservations("t", [0.0], keypoints, np.full((1, 4, 1), confidence), ("axis",))
    markers = np.tile([0.0, 0.0, 2.0], (1, 4, 1))
    return markers, obs


def walk(n_steps=5, stride=1.2, width=0.1, angle=0.0, shift=(0.0, 0.0)):
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s], [s, c]])
    events = []
    for i in range(n_steps):
        side = "left" if i % 2 == 0 else "right"
        lateral = width / 2 if side == "left" else -width / 2
        xy = rotation @ np.array([i * stride / 2, lateral]) + shift
        events.append(HeelStrike(side, 0.5 * i, [xy[0], xy[1], 0.0]))
    return events


def test_consistency_fraction_example():
    assert consistency_fraction(np.array(ERRORS_PX), np.ones(4), d=5.0) == 0.5


def test_geometric_consistency(axis_rig):
    markers, obs = offset_trial()
    assert geometric_consistency(markers, obs, axis_rig, d=5.0) == pytest.approx(0.5)
    assert geometric_consistency(markers, obs, axis_rig, d=10.0) == 1.0
    assert geometric_consistency(markers, obs, axis_rig, d=0.5) == 0.0


def test_geometric_consistency_undefined(axis_rig):
    markers, obs = offset_trial(confidence=0.2)
    assert geometric_consistency(markers, obs, axis_rig, confidence_floor=0.5) is None
    with pytest.raises(MetricUndefinedError):
        geometric_consistency(markers, obs, axis_rig, confidence_floor=0.5, strict=True)


def test_consistency_report_is_non_decreasing(axis_rig):
    markers, obs = offset_trial()
    report = consistency_report([markers], [obs], axis_rig)
    assert len(report.fractions) == 20
    assert np.all(np.diff(report.fractions) >= 0)
    assert report.at(5) == 0.5
    assert report.per_trial["t"] == report.fractions
    assert report.to_dict()["per_trial_mean"][4] == 0.5


def test_mean_residual(axis_rig):
    markers, obs = offset_trial()
    assert mean_residual(markers, obs, axis_rig) == pytest.approx(np.mean(ERRORS_PX))
    markers, obs = offset_trial(confidence=0.0)
    with pytest.raises(MetricUndefinedError):
        mean_residual(markers, obs, axis_rig)


def test_sigma_iqr_example():
    assert sigma_iqr([1.0, 2.0, 3.0, 4.0]) == pytest.approx(1.11195)


def test_sigma_iqr_of_standard_normal():
    samples = np.random.default_rng(0).normal(size=1_000_000)
    assert sigma_iqr(samples) == pytest.approx(1.0, abs=0.01)


def test_sigma_iqr_too_few():
    with pytest.raises(MetricUndefinedError):
        sigma_iqr([1.0, 2.0, np.nan, 3.0])


def test_stationary_heel_has_no_strikes():
    assert detect_heel_strikes(np.tile([0.1, 0.0, 0.03], (300, 1)), 100.0).size == 0


def test_periodic_heel_strikes():
    t = np.arange(301) / 100.0
    heel = np.column_stack([t, np.zeros_like(t), 0.05 * (1.0 - np.cos(2 * np.pi * t))])
    np.testing.assert_allclose(detect_heel_strikes(heel, 100.0), [1.0, 2.0])


def test_heel_strikes_merge_sides():
    t = np.arange(301) / 100.0
    left = np.column_stack([t, np.full_like(t, 0.05), 0.05 * (1.0 - np.cos(2 * np.pi * t))])
    right = np.column_stack([t, np.full_like(t, -0.05), 0.05 * (1.0 - np.cos(2 * np.pi * (t - 0.5)))])
    events = heel_strikes({"left": left, "right": right}, 100.0)
    assert [e.side for e in events] == ["right", "left", "right", "left", "right"]
    np.testing.assert_allclose([e.time for e in events], [0.5, 1.0, 1.5, 2.0, 2.5])


def test_step_table_example():
    table = step_parameters(walk())
    np.testing.assert_allclose(table.values("stride_length"), 1.2, atol=1e-6)
    np.testing.assert_allclose(table.values("step_width"), 0.1, atol=1e-6)
    np.testing.assert_allclose(table.values("step_length"), 0.6, atol=1e-6)
    assert len(table.values("stride_length")) == 3
    assert all(r.alternating for r in table.rows)


def test_step_table_rotation_invariant():
    base = step_parameters(walk())
    turned = step_parameters(walk(angle=0.7, shift=(3.0, -1.0)))
    for key in ("step_length", "stride_length", "step_width"):
        np.testing.assert_allclose(turned.values(key), base.values(key), atol=1e-9)


def test_step_table_flags_same_side():
    events = walk()
    events[2] = HeelStrike("right", events[2].time, events[2].position)
    table = step_parameters(events)
    assert not table.rows[2].alternating
    assert table.rows[2].step_length is None


def test_match_events_pairs_same_side():
    reference = walk()
    measured = [HeelStrike(e.side, e.time + 0.05, e.position) for e in reference[1:]]
    pairs = match_events(reference, measured)
    assert [r.time for r, _ in pairs] == [0.5, 1.0, 1.5, 2.0]
    assert all(r.side == m.side for r, m in pairs)


def test_clock_offset_beyond_match_window():
    reference = walk()
    measured = [HeelStrike(e.side, e.time - 0.7, e.position + [0.3, 0.1, 0.0]) for e in reference]
    assert match_events(reference, measured) == []
    offset = estimate_time_offset(reference, measured)
    assert offset == pytest.approx(0.7)
    pairs = match_events(reference, measured, offset=offset)
    assert len(pairs) == len(reference)
    a = np.array([[m.time, *m.position[:2]] for _, m in pairs])
    b = np.array([[r.time, *r.position[:2]] for r, _ in pairs])
    alignment = align_trials(a, b)
    assert alignment.time_offset == pytest.approx(0.7)
    np.testing.assert_allclose(alignment.translation, [-0.3, -0.1], atol=1e-9)


def test_time_offset_without_common_sides():
    left = [e for e in walk() if e.side == "left"]
    right = [e for e in walk() if e.side == "right"]
    assert estimate_time_offset(left, right) == 0.0


def test_step_errors_against_reference():
    reference = step_parameters(walk())
    measured = step_parameters(walk(stride=1.25))
    errors = step_errors(reference, measured)
    np.testing.assert_allclose(errors["stride_length"], 0.05, atol=1e-9)
    np.testing.assert_allclose(errors["step_length"], 0.025, atol=1e-9)


def test_align_recovers_translation_and_time(rng):
    a = np.column_stack([np.arange(6) * 0.5, rng.uniform(0, 5, 6), rng.uniform(-0.5, 0.5, 6)])
    b = a + [0.1, 0.5, 0.2]
    alignment = align_trials(a, b)
    np.testing.assert_allclose(alignment.matrix, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(alignment.translation, [0.5, 0.2], atol=1e-9)
    assert alignment.time_offset == pytest.approx(0.1)
    assert alignment.rms < 1e-9


def test_align_collinear_is_degenerate():
    a = np.column_stack([np.arange(4.0), np.arange(4.0), np.arange(4.0)])
    with pytest.raises(DegenerateGeometryError):
        align_trials(a, a)


def test_load_walkway(tmp_path):
    path = tmp_path / "walkway.json"
    path.write_text(json.dumps([[1.0, 0.6, -0.05, "right"], [0.5, 0.0, 0.05, "left"]]))
    events = load_walkway(path)
    assert [e.side for e in events] == ["left", "right"]
    path.write_text(json.dumps([[1.0, 0.6, -0.05, "middle"]]))
    with pytest.raises(ValueError):
        load_walkway(path)
