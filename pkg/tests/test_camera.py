import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from kinefit import autodiff as ad
from kinefit.camera import (
    Camera,
    CameraRig,
    ExtrinsicDelta,
    compose_extrinsic_delta,
    delta_report,
    load_rig,
    project,
    project_points,
    rig_from_json,
    save_rig,
)
from kinefit.exceptions import BehindCameraError, ShapeError


def _with(camera, **changes):
    data = camera.to_dict()
    data.update(changes)
    return Camera.from_dict(data)


def test_point_on_axis_hits_principal_point(axis_camera):
    np.testing.assert_allclose(project(axis_camera, None, [0.0, 0.0, 2.0]), [0.0, 0.0])


def test_offset_point(axis_camera):
    np.testing.assert_allclose(project(axis_camera, None, [0.1, 0.0, 2.0]), [50.0, 0.0])


def test_radial_distortion(axis_camera):
    camera = _with(axis_camera, k1=-0.1)
    # r^2 = 0.05, factor = 1 - 0.1 * 0.05
    np.testing.assert_allclose(project(camera, None, [0.2, 0.1, 1.0]), [199.0, 99.5])


def test_behind_camera(axis_camera):
    with pytest.raises(BehindCameraError):
        project(axis_camera, None, [0.0, 0.0, -1.0])
    with pytest.raises(BehindCameraError):
        project(axis_camera, None, [0.3, 0.0, 0.0])


def test_zero_delta_is_identity(axis_camera):
    point = [0.3, -0.2, 3.0]
    np.testing.assert_allclose(project(axis_camera, ExtrinsicDelta(), point), project(axis_camera, None, point))


def test_compose_translation(axis_camera):
    moved = compose_extrinsic_delta(axis_camera, ExtrinsicDelta(d_translation=(0.0, 0.0, 0.01)))
    np.testing.assert_allclose(moved.translation, (0.0, 0.0, 0.01))


def test_compose_rotation_about_shared_axis(axis_camera):
    base = _with(axis_camera, rotation_axis_angle=[0.0, 0.0, np.radians(30.0)])
    moved = compose_extrinsic_delta(base, ExtrinsicDelta(d_rotation=(0.0, 0.0, np.radians(0.5))))
    np.testing.assert_allclose(moved.rotation, (0.0, 0.0, np.radians(30.5)), atol=1e-12)


def test_project_with_delta_matches_composed_camera(axis_camera, rng):
    delta = ExtrinsicDelta(rng.normal(scale=0.01, size=3), rng.normal(scale=0.01, size=3))
    composed = compose_extrinsic_delta(axis_camera, delta)
    point = np.array([0.2, -0.1, 3.0])
    np.testing.assert_allclose(project(axis_camera, delta, point), project(composed, None, point), atol=1e-9)


def _ring_rig():
    cameras = []
    for i, angle in enumerate(np.linspace(0.0, 2 * np.pi, 4, endpoint=False)):
        # camera on a 4 m circle, looking at the origin
        center = 4.0 * np.array([np.cos(angle), np.sin(angle), 0.0])
        forward = -center / np.linalg.norm(center)
        right = np.cross(forward, [0.0, 0.0, 1.0])
        down = np.cross(forward, right)
        rotation = np.stack([right, down, forward])
        cameras.append(Camera(
            name=f"cam{i}", fx=1200.0, fy=1200.0, cx=960.0, cy=540.0,
            rotation=Rotation.from_matrix(rotation).as_rotvec(),
            translation=-rotation @ center, width=1920, height=1080, k1=-0.05, k2=0.01,
        ))
    return CameraRig(tuple(cameras))


def test_project_points_matches_single_point_projection(rng):
    rig = _ring_rig()
    points = rng.uniform(-0.5, 0.5, size=(2, 5, 3))
    deltas = rng.normal(scale=0.01, size=(4, 6))
    pixels, in_front = project_points(rig, points, deltas)
    assert pixels.shape == (2, 5, 4, 2)
    assert in_front.all()
    for c, cam in enumerate(rig.cameras):
        delta = ExtrinsicDelta.from_vector(deltas[c])
        np.testing.assert_allclose(pixels[1, 3, c], project(cam, delta, points[1, 3]), atol=1e-8)


def test_project_points_masks_points_behind(axis_rig):
    pixels, in_front = project_points(axis_rig, np.array([[[0.0, 0.0, 2.0], [0.1, 0.0, -1.0]]]))
    np.testing.assert_array_equal(in_front, [[[True], [False]]])
    assert np.all(np.isfinite(pixels))


def test_project_points_gradients(rng):
    rig = _ring_rig()
    weights = rng.normal(size=(1, 3, 4, 2))
    inputs = {"points": rng.uniform(-0.5, 0.5, size=(1, 3, 3)), "deltas": rng.normal(scale=0.01, size=(4, 6))}

    def program(p):
        pixels, _ = project_points(rig, p["points"], p["deltas"])
        return ad.sum(pixels * weights)

    result = ad.evaluate_with_gradients(program, inputs)
    numeric = ad.finite_difference_gradient(lambda p: ad.value_of(program(p)), inputs, step=1e-5)
    for name in inputs:
        assert np.max(ad.relative_error(result.grads[name], numeric[name])) < 1e-3, name


def test_project_points_shape_errors(axis_rig):
    with pytest.raises(ShapeError):
        project_points(axis_rig, np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        project_points(axis_rig, np.zeros((1, 4, 3)), np.zeros((2, 6)))


def test_rig_validation(axis_camera):
    with pytest.raises(ValueError):
        CameraRig(())
    with pytest.raises(ValueError, match="duplicate"):
        CameraRig((axis_camera, axis_camera))
    with pytest.raises(ValueError):
        _with(axis_camera, fx=0.0)


def test_rig_select_and_index():
    rig = _ring_rig()
    sub = rig.select(["cam2", "cam0"])
    assert sub.names == ("cam2", "cam0")
    assert rig.index("cam3") == 3
    with pytest.raises(KeyError):
        rig.index("nope")


def test_with_deltas_bakes_increment(rng):
    rig = _ring_rig()
    deltas = rng.normal(scale=0.01, size=(4, 6))
    baked = rig.with_deltas(deltas)
    points = rng.uniform(-0.5, 0.5, size=(1, 4, 3))
    np.testing.assert_allclose(project_points(baked, points)[0], project_points(rig, points, deltas)[0], atol=1e-8)


def test_delta_report_units(axis_rig):
    report = delta_report(axis_rig, [[0.0, 0.0, np.radians(0.5), 0.0, 0.003, 0.004]])
    assert report[0]["rotation_deg"] == pytest.approx(0.5)
    assert report[0]["translation_mm"] == pytest.approx(5.0)


def test_rig_file_round_trip(tmp_path):
    rig = _ring_rig()
    path = tmp_path / "rig.json"
    save_rig(rig, path)
    assert load_rig(path) == rig


def test_rig_file_accepts_wrapped_list(axis_camera):
    text = json.dumps({"cameras": [axis_camera.to_dict()]})
    assert rig_from_json(text).names == ("axis",)


def test_rig_file_missing_field(axis_camera):
    entry = axis_camera.to_dict()
    del entry["fx"]
    with pytest.raises(ValueError, match="fx"):
        rig_from_json(json.dumps([entry]))
