import json
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from kinefit.config import FitConfig
from kinefit.exceptions import DivergenceError, ShapeError
from kinefit.fitter import fit_session, meta_fit, read_trial_result, write_session
from kinefit.kinematics import constraint_error, forward_kinematics
from kinefit.metrics import geometric_consistency, mean_residual
from kinefit.model import parse_model, serialize_model
from kinefit.objective import TrialObservations
from kinefit.synth import SynthConfig, generate_session


@pytest.fixture
def quick():
    """Small network, constant learning rate, bundle adjustment from iteration 15."""
    return FitConfig(
        steps=20, layer_sizes=(16,), batch_timepoints=20, lr_start=3e-3, lr_end=3e-3,
        ba_start_step=15, log_every=0, threads=1,
    )


def _flat(fit):
    blocks = [fit.subject.scales, fit.subject.site_offsets, fit.camera_deltas]
    for traj in fit.trajectories:
        blocks += traj.weights + traj.biases
    return blocks


def test_same_seed_same_fit(biped, small_session, quick):
    a = fit_session(biped, small_session.rig, small_session.trials, quick)
    b = fit_session(biped, small_session.rig, small_session.trials, quick)
    for x, y in zip(_flat(a), _flat(b)):
        np.testing.assert_array_equal(x, y)
    assert a.fit_log.totals() == b.fit_log.totals()


def test_threaded_fit_matches_serial(biped, small_session, quick):
    serial = fit_session(biped, small_session.rig, small_session.trials, quick)
    quick.threads = 2
    threaded = fit_session(biped, small_session.rig, small_session.trials, quick)
    for x, y in zip(_flat(serial), _flat(threaded)):
        np.testing.assert_array_equal(x, y)


def test_camera_deltas_follow_schedule(biped, small_session, quick):
    early = fit_session(biped, small_session.rig, small_session.trials, quick, max_iterations=10)
    np.testing.assert_array_equal(early.camera_deltas, 0.0)
    assert not any(r.ba_active for r in early.fit_log.records)
    late = fit_session(biped, small_session.rig, small_session.trials, quick)
    np.testing.assert_array_equal(late.camera_deltas[0], 0.0)
    assert np.any(late.camera_deltas[1:] != 0.0)
    assert late.fit_log.records[15].ba_active


def test_bundle_adjust_can_be_disabled(biped, small_session, quick):
    quick.bundle_adjust = False
    fit = fit_session(biped, small_session.rig, small_session.trials, quick)
    np.testing.assert_array_equal(fit.camera_deltas, 0.0)


def test_loss_decreases(biped, small_session, quick):
    quick.steps = 100
    quick.ba_start_step = 100
    totals = fit_session(biped, small_session.rig, small_session.trials, quick).fit_log.totals()
    assert np.mean(totals[-5:]) < np.mean(totals[:5])


def test_fit_shapes(biped, small_session, quick):
    fit = fit_session(biped, small_session.rig, small_session.trials, quick, max_iterations=2)
    assert fit.iterations == 2
    assert fit.poses(biped, 1).shape == (30, biped.n_dof)
    assert fit.markers(biped, 0).shape == (30, biped.n_sites, 3)
    assert fit.trial_names == ["trial01", "trial02"]
    assert len(fit.fit_log) == 2


def test_divergence_raises_with_snapshot(biped, small_session, quick):
    trial = small_session.trials[0]
    broken = TrialObservations(
        trial.name, trial.times, np.full_like(trial.keypoints, np.nan), trial.confidences,
        trial.camera_names, trial.joint_names, trial.fps,
    )
    quick.max_nonfinite = 2
    with pytest.raises(DivergenceError) as exc:
        fit_session(biped, small_session.rig, [broken], quick)
    assert exc.value.iteration == 2
    assert exc.value.snapshot["last_finite_loss"] is None
    assert len(exc.value.snapshot["scales"]) == biped.n_scales


def test_rejects_mismatched_trials(biped, small_session, quick):
    with pytest.raises(ValueError):
        fit_session(biped, small_session.rig, [], quick)
    with pytest.raises(ValueError):
        fit_session(biped, small_session.rig, [small_session.trials[0], small_session.trials[0]], quick)
    with pytest.raises(ShapeError):
        fit_session(biped, small_session.rig.select(["cam0", "cam1"]), small_session.trials, quick)


def test_constrained_fit_tracks_violation(spine, quick):
    session = generate_session(SynthConfig(n_trials=1, n_cameras=4, duration=1.0, seed=3), spine)
    fit = fit_session(spine, session.rig, session.trials, quick, max_iterations=3)
    assert all(r.l_eps > 0.0 for r in fit.fit_log.records)


def test_write_and_read_results(tmp_path, biped, small_session, quick):
    fit = fit_session(biped, small_session.rig, small_session.trials, quick, max_iterations=2)
    written = write_session(fit, biped, small_session.trials, tmp_path)
    assert tmp_path / "trial01.fit.json" in written
    assert (tmp_path / "fit_log.csv").exists()
    times, poses, subject = read_trial_result(tmp_path / "trial02.fit.json", biped)
    np.testing.assert_array_equal(poses, fit.poses(biped, 1))
    np.testing.assert_array_equal(subject.scales, fit.subject.scales)
    data = json.loads((tmp_path / "trial01.fit.json").read_text())
    assert set(data["camera_deltas"]) == set(small_session.rig.names)
    assert 0.0 <= data["metrics"]["gc5"] <= 1.0


def test_meta_fit_needs_population(biped, small_session, quick):
    with pytest.raises(ValueError, match="two subjects"):
        meta_fit(biped, [(small_session.rig, small_session.trials)], quick)
    sessions = [(small_session.rig, small_session.trials[:1]), (small_session.rig, small_session.trials[1:])]
    with pytest.raises(ValueError, match="nose"):
        meta_fit(biped, sessions, quick, frozen_sites=("nose",))


def test_meta_fit_keeps_frozen_sites(biped, small_session, quick):
    sessions = [(small_session.rig, small_session.trials[:1]), (small_session.rig, small_session.trials[1:])]
    result = meta_fit(biped, sessions, quick, max_iterations=5)
    heels = [biped.site_index("heel_r"), biped.site_index("heel_l")]
    np.testing.assert_array_equal(result.model.site_positions[heels], biped.site_positions[heels])
    assert not np.array_equal(result.model.site_positions, biped.site_positions)
    assert len(result.fits) == 2
    assert parse_model(serialize_model(result.model)) == result.model


# --- recovery on synthetic sessions ---

def _fitted_rig_errors(refined, true_rig):
    errors = []
    for fitted, truth in zip(refined.cameras, true_rig.cameras):
        relative = Rotation.from_rotvec(fitted.rotation) * Rotation.from_rotvec(truth.rotation).inv()
        errors.append((np.degrees(relative.magnitude()), 1000.0 * np.linalg.norm(np.subtract(fitted.center, truth.center))))
    return np.array(errors)


@pytest.mark.slow
def test_noiseless_recovery(biped):
    session = generate_session(SynthConfig(n_trials=2, n_cameras=8, seed=11), biped)
    fit = fit_session(biped, session.rig, session.trials, FitConfig.from_preset("desk"))
    truth = session.truth
    heels = [biped.site_index("heel_r"), biped.site_index("heel_l")]
    for n, trial in enumerate(session.trials):
        markers = fit.markers(biped, n)
        assert mean_residual(markers, trial, fit.refined_rig()) < 0.5
        true_markers = forward_kinematics(biped, truth.poses[n], truth.subject)
        rmse = np.sqrt(np.mean(np.sum((markers[:, heels] - true_markers[:, heels]) ** 2, axis=-1)))
        assert rmse < 0.005
    np.testing.assert_allclose(fit.subject.scales, truth.subject.scales, rtol=0.01)
    assert fit.fit_log.last.total <= fit.fit_log.first.total


@pytest.mark.slow
def test_noisy_recovery(biped):
    session = generate_session(SynthConfig(n_trials=2, n_cameras=8, noise_px=2.0, outlier_rate=0.02, seed=12), biped)
    fit = fit_session(biped, session.rig, session.trials, FitConfig.from_preset("desk"))
    lo, hi, bounded = biped.dof_bounds
    for n, trial in enumerate(session.trials):
        assert geometric_consistency(fit.markers(biped, n), trial, session.truth.rig, d=5.0) >= 0.9
        errors = fit.poses(biped, n)[:, bounded] - session.truth.poses[n][:, bounded]
        assert np.degrees(np.sqrt(np.mean(errors ** 2))) < 3.0


@pytest.mark.slow
def test_bundle_adjustment_recovery(biped):
    config = SynthConfig(n_trials=2, n_cameras=8, rotation_perturbation_deg=0.5, translation_perturbation_mm=10.0, seed=13)
    session = generate_session(config, biped)
    with_ba = fit_session(biped, session.rig, session.trials, FitConfig.from_preset("desk"))
    without = fit_session(biped, session.rig, session.trials, FitConfig.from_preset("desk", bundle_adjust=False))
    errors = _fitted_rig_errors(with_ba.refined_rig(), session.truth.rig)
    assert errors[:, 0].max() < 0.1
    assert errors[:, 1].max() < 2.0

    def gc5(fit):
        return np.mean([
            geometric_consistency(fit.markers(biped, n), trial, fit.refined_rig(), d=5.0)
            for n, trial in enumerate(session.trials)
        ])

    assert gc5(with_ba) > gc5(without)


@pytest.mark.slow
def test_trilevel_recovers_displaced_site(biped):
    moved_site = biped.site_index("knee_lat_r")
    truth_sites = biped.site_positions.copy()
    truth_sites[moved_site, 0] += 0.02
    truth_model = biped.with_site_positions(truth_sites)
    sessions = []
    for s, overall in enumerate((0.96, 1.0, 1.05)):
        config = SynthConfig(n_trials=1, n_cameras=6, duration=1.5, scales={"overall": overall}, seed=20 + s)
        session = generate_session(config, truth_model)
        sessions.append((session.rig, session.trials))
    result = meta_fit(biped, sessions, FitConfig.from_preset("desk"))
    error = np.linalg.norm(result.model.site_positions[moved_site] - truth_sites[moved_site])
    assert error < 0.005
    heels = [biped.site_index("heel_r"), biped.site_index("heel_l")]
    np.testing.assert_array_equal(result.model.site_positions[heels], biped.site_positions[heels])


@pytest.mark.slow
def test_constraint_violation_is_driven_down(spine):
    session = generate_session(SynthConfig(n_trials=2, n_cameras=8, seed=14), spine)
    fit = fit_session(spine, session.rig, session.trials, FitConfig.from_preset("desk"))
    for n in range(len(session.trials)):
        assert np.mean(constraint_error(spine, fit.poses(spine, n)) ** 2) < 1e-4


@pytest.mark.slow
def test_full_preset_runs(biped, small_session):
    config = FitConfig.from_preset("full", log_every=10)
    fit = fit_session(biped, small_session.rig, small_session.trials, config, max_iterations=50)
    assert fit.iterations == 50
    assert np.all(np.isfinite(fit.fit_log.totals()))


def test_desk_preset_fits_within_two_minutes(biped):
    session = generate_session(SynthConfig(n_trials=2, n_cameras=8, seed=11), biped)
    config = FitConfig.from_preset("desk", threads=1)
    iterations = 40
    started = time.perf_counter()
    fit_session(biped, session.rig, session.trials, config, max_iterations=iterations)
    per_step = (time.perf_counter() - started) / iterations
    assert per_step * config.steps < 120.0, f"{per_step * 1000:.1f} ms per step"
