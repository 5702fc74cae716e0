import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from kinefit.camera import project_points
from kinefit.kinematics import constraint_error, forward_kinematics
from kinefit.metrics import step_parameters
from kinefit.objective import reprojection_loss
from kinefit.synth import SynthConfig, generate_session, load_synth_config, load_truth, perturb_rig, ring_rig, write_session
from kinefit.trials import read_trial


def test_truth_reprojects_exactly(small_session, biped):
    truth = small_session.truth
    for trial, poses in zip(small_session.trials, truth.poses):
        markers = forward_kinematics(biped, poses, truth.subject)
        assert reprojection_loss(markers, trial, truth.rig) == pytest.approx(0.0, abs=1e-12)


def test_session_shapes(small_session, biped):
    assert len(small_session.trials) == 2
    trial = small_session.trials[0]
    assert trial.keypoints.shape == (30, biped.n_sites, 4, 2)
    assert trial.joint_names == biped.site_names
    assert trial.camera_names == ("cam0", "cam1", "cam2", "cam3")
    assert np.all(trial.confidences > 0.8)


def test_generation_is_deterministic(biped):
    config = SynthConfig(n_trials=1, n_cameras=3, duration=0.5, noise_px=1.0, outlier_rate=0.05, seed=3)
    a = generate_session(config, biped)
    b = generate_session(config, biped)
    np.testing.assert_array_equal(a.trials[0].keypoints, b.trials[0].keypoints)
    np.testing.assert_array_equal(a.trials[0].confidences, b.trials[0].confidences)


def test_noise_level(biped):
    config = SynthConfig(n_trials=2, n_cameras=4, duration=1.0, noise_px=2.0, seed=7)
    session = generate_session(config, biped)
    noise = []
    for trial, poses in zip(session.trials, session.truth.poses):
        clean, _ = project_points(session.truth.rig, forward_kinematics(biped, poses, session.truth.subject))
        noise.append((trial.keypoints - clean).reshape(-1))
    assert np.std(np.concatenate(noise)) == pytest.approx(2.0, rel=0.05)


def test_outliers_get_low_confidence(biped):
    config = SynthConfig(n_trials=1, n_cameras=4, duration=1.0, outlier_rate=0.1, seed=2)
    confidences = generate_session(config, biped).trials[0].confidences
    assert np.mean(confidences < 0.5) == pytest.approx(0.1, abs=0.02)


def test_gait_geometry_matches_configuration(biped):
    config = SynthConfig(n_trials=1, n_cameras=2, duration=4.0, stride_length=1.3, step_width=0.12)
    truth = generate_session(config, biped).truth
    table = step_parameters(truth.events[0])
    np.testing.assert_allclose(table.values("stride_length"), 1.3, atol=1e-6)
    np.testing.assert_allclose(table.values("step_length"), 0.65, atol=1e-6)
    np.testing.assert_allclose(table.values("step_width"), 0.12, atol=1e-6)
    assert truth.step_length == pytest.approx(0.65)


def test_constrained_model_poses_satisfy_constraints(spine):
    truth = generate_session(SynthConfig(n_trials=1, n_cameras=2, duration=0.5), spine).truth
    np.testing.assert_allclose(constraint_error(spine, truth.poses[0]), 0.0, atol=1e-15)


def test_unreachable_step_width(biped):
    with pytest.raises(ValueError, match="step width"):
        generate_session(SynthConfig(n_trials=1, n_cameras=2, duration=0.5, step_width=3.0), biped)


def test_perturbation_magnitudes(rng):
    rig = ring_rig(SynthConfig(n_cameras=4))
    moved = perturb_rig(rig, 1.0, 20.0, rng)
    assert moved.cameras[0] == rig.cameras[0]
    for before, after in zip(rig.cameras[1:], moved.cameras[1:]):
        relative = Rotation.from_rotvec(after.rotation) * Rotation.from_rotvec(before.rotation).inv()
        assert np.degrees(relative.magnitude()) == pytest.approx(1.0)
        shift = np.linalg.norm(np.subtract(after.translation, before.translation))
        assert 1000.0 * shift == pytest.approx(20.0)


def test_ring_cameras_look_at_center():
    config = SynthConfig(n_cameras=6)
    pixels, in_front = project_points(ring_rig(config), np.array([[[0.0, 0.0, 0.9]]]))
    assert in_front.all()
    np.testing.assert_allclose(pixels[0, 0], np.tile([1024.0, 768.0], (6, 1)), atol=1e-6)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        SynthConfig(n_cameras=0)
    with pytest.raises(ValueError):
        SynthConfig(outlier_rate=1.0)
    path = tmp_path / "synth.json"
    path.write_text('{"n_trials": 3, "noise_px": 1.5}')
    config = load_synth_config(path)
    assert (config.n_trials, config.noise_px) == (3, 1.5)
    path.write_text('{"trials": 3}')
    with pytest.raises(ValueError, match="trials"):
        load_synth_config(path)


def test_write_session(tmp_path, small_session, biped):
    written = write_session(small_session, biped, tmp_path)
    assert (tmp_path / "rig.json") in written
    assert (tmp_path / "trial01.walkway.json").exists()
    trial = read_trial(tmp_path / "trial01")
    np.testing.assert_allclose(trial.keypoints, small_session.trials[0].keypoints, rtol=1e-6, atol=1e-3)
    truth = load_truth(tmp_path / "truth.json", biped)
    np.testing.assert_array_equal(truth.poses[1], small_session.truth.poses[1])
    assert truth.rig == small_session.truth.rig
    assert truth.hip_adduction == small_session.truth.hip_adduction
