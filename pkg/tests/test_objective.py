import numpy as np
import pytest

from kinefit import autodiff as ad
from kinefit.exceptions import ShapeError
from kinefit.model import SubjectParams, parse_model
from kinefit.objective import (
    LossComponents,
    LossWeights,
    TrialObservations,
    confidence_from_std,
    constraint_loss,
    offset_regularization,
    reprojection_loss,
    reprojection_residuals,
    total_loss,
)

ON_AXIS = np.array([[[0.0, 0.0, 2.0]]])


def single_observation(pixel, confidence=1.0, camera="axis"):
    return TrialObservations(
        name="t",
        times=[0.0],
        keypoints=np.array(pixel, dtype=float).reshape(1, 1, 1, 2),
        confidences=np.full((1, 1, 1), confidence),
        camera_names=(camera,),
    )


def test_confidence_examples():
    assert confidence_from_std(30.0) == pytest.approx(0.5)
    assert confidence_from_std(0.0) == pytest.approx(1.0 / (1.0 + np.exp(-3.0)))
    assert confidence_from_std(0.0) == pytest.approx(0.9526, abs=1e-4)
    assert confidence_from_std(1e6) == 0.0
    sigmas = np.array([0.0, 10.0, 30.0, 60.0])
    assert np.all(np.diff(confidence_from_std(sigmas)) < 0)
    with pytest.raises(ValueError):
        confidence_from_std(-1.0)


def test_exact_reprojection_is_zero(axis_rig):
    assert reprojection_loss(ON_AXIS, single_observation([0.0, 0.0]), axis_rig) == 0.0


def test_quadratic_branch(axis_rig):
    assert reprojection_loss(ON_AXIS, single_observation([1.0, 0.0]), axis_rig, huber_delta=10.0) == pytest.approx(0.5)


def test_linear_branch(axis_rig):
    assert reprojection_loss(ON_AXIS, single_observation([100.0, 0.0]), axis_rig, huber_delta=10.0) == pytest.approx(950.0)


def test_huber_is_continuous_at_threshold(axis_rig):
    below = reprojection_loss(ON_AXIS, single_observation([10.0 - 1e-9, 0.0]), axis_rig)
    above = reprojection_loss(ON_AXIS, single_observation([10.0 + 1e-9, 0.0]), axis_rig)
    assert abs(above - below) < 1e-7
    assert below == pytest.approx(50.0)


def test_loss_is_monotone_in_residual(axis_rig):
    losses = [reprojection_loss(ON_AXIS, single_observation([r, 0.0]), axis_rig) for r in np.linspace(0, 40, 41)]
    assert np.all(np.diff(losses) > 0)


def test_count_normalization(axis_rig):
    obs = TrialObservations(
        name="t",
        times=[0.0, 0.1],
        keypoints=np.array([[[[1.0, 0.0]]], [[[0.0, 0.0]]]]),
        confidences=np.ones((2, 1, 1)),
        camera_names=("axis",),
    )
    markers = np.repeat(ON_AXIS, 2, axis=0)
    assert reprojection_loss(markers, obs, axis_rig) == pytest.approx(0.25)


def test_zero_confidence_contributes_nothing(axis_rig):
    obs = single_observation([300.0, 0.0], confidence=0.0)
    result = ad.evaluate_with_gradients(lambda p: reprojection_loss(p["x"], obs, axis_rig), {"x": ON_AXIS})
    assert result.value == 0.0
    np.testing.assert_array_equal(result.grads["x"], np.zeros_like(ON_AXIS))


def test_behind_camera_terms_are_dropped(axis_rig):
    obs = single_observation([5.0, 5.0])
    assert reprojection_loss(np.array([[[0.0, 0.0, -2.0]]]), obs, axis_rig) == 0.0
    _, mask = reprojection_residuals(np.array([[[0.0, 0.0, -2.0]]]), obs, axis_rig, with_mask=True)
    assert not mask.any()


def test_loss_gradients_match_finite_differences(axis_rig, rng):
    obs = TrialObservations(
        name="t",
        times=[0.0, 0.1],
        keypoints=rng.normal(scale=20.0, size=(2, 3, 1, 2)),
        confidences=rng.uniform(0.2, 1.0, size=(2, 3, 1)),
        camera_names=("axis",),
    )
    inputs = {"x": np.concatenate([rng.normal(scale=0.02, size=(2, 3, 2)), np.full((2, 3, 1), 2.0)], axis=-1),
              "d": rng.normal(scale=0.001, size=(1, 6))}

    def program(p):
        return reprojection_loss(p["x"], obs, axis_rig, p["d"])

    result = ad.evaluate_with_gradients(program, inputs)
    numeric = ad.finite_difference_gradient(lambda p: ad.value_of(program(p)), inputs, step=1e-6)
    for name in inputs:
        assert np.max(ad.relative_error(result.grads[name], numeric[name])) < 1e-4, name


def test_unknown_camera(axis_rig):
    with pytest.raises(KeyError):
        reprojection_loss(ON_AXIS, single_observation([0.0, 0.0], camera="side"), axis_rig)


def test_marker_shape_mismatch(axis_rig):
    with pytest.raises(ShapeError):
        reprojection_loss(np.zeros((1, 2, 3)), single_observation([0.0, 0.0]), axis_rig)


def test_observation_validation():
    with pytest.raises(ValueError):
        single_observation([0.0, 0.0], confidence=1.5)
    with pytest.raises(ValueError):
        TrialObservations("t", [0.0, 0.0], np.zeros((2, 1, 1, 2)), np.ones((2, 1, 1)), ("a",))
    with pytest.raises(ShapeError):
        TrialObservations("t", [0.0], np.zeros((1, 1, 2, 2)), np.ones((1, 1, 2)), ("a",))


def test_subset_allows_repeats():
    obs = TrialObservations("t", [0.0, 0.1, 0.2], np.zeros((3, 1, 1, 2)), np.ones((3, 1, 1)), ("a",))
    sub = obs.subset([2, 2, 0])
    np.testing.assert_array_equal(sub.times, [0.2, 0.2, 0.0])
    assert sub.keypoints.shape == (3, 1, 1, 2)


def test_offset_regularization_examples(biped):
    subject = SubjectParams.neutral(biped)
    assert offset_regularization(subject) == 0.0
    subject.site_offsets[5, 1] = 0.03
    assert offset_regularization(subject) == pytest.approx(0.0009 / 261)
    assert offset_regularization(subject) == pytest.approx(3.448e-6, rel=1e-3)
    scaled = SubjectParams(np.full(biped.n_scales, 2.0), np.zeros((biped.n_sites, 3)))
    assert offset_regularization(scaled) == 0.0


def test_constraint_loss_examples(biped):
    model = parse_model(
        "body a parent=none\nbody b parent=a\n"
        "joint b kind=hinge axis=1,0,0 name=h1\njoint b kind=hinge axis=0,1,0 name=h2\n"
        "joint b kind=hinge axis=0,0,1 name=h3\n"
        "constraint h1 h2\nconstraint h3 h2\n"
    )
    assert constraint_loss(model, np.array([0.3, 0.3, 0.3])) == 0.0
    assert constraint_loss(model, np.array([0.5, 0.3, 0.3])) == pytest.approx(0.02)
    assert constraint_loss(biped, np.zeros(biped.n_dof)) == 0.0


def test_total_loss_examples():
    assert total_loss(LossComponents(1.0, 2.0), LossWeights(lambda_beta=0.1)) == pytest.approx(1.2)
    assert total_loss(LossComponents()) == 0.0
    assert total_loss(LossComponents(1.0, 0.0, 4.0, has_constraints=True), LossWeights()) == pytest.approx(1.04)
    # the constraint term only counts for constrained models
    assert total_loss(LossComponents(1.0, 0.0, 4.0)) == pytest.approx(1.0)


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(lambda_beta=1.0, lambda_eps=0.01, huber_delta=10.0)
    with pytest.raises(ValueError):
        LossWeights(huber_delta=-1.0)
