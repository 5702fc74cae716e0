"""Calibrated pinhole cameras with optional radial distortion.

Extrinsics map world to camera: ``p_cam = R(d_rot) R x + t + d_t``. The
``(d_rot, d_t)`` increment is what bundle adjustment learns; intrinsics stay
frozen.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .exceptions import BehindCameraError, ShapeError

logger = logging.getLogger(__name__)

RIG_FIELDS = (
    "name", "fx", "fy", "cx", "cy", "k1", "k2",
    "rotation_axis_angle", "translation", "width", "height",
)


def _vec3(values, what: str) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ShapeError(f"{what} must have 3 components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} must be finite")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class Camera:
    """One calibrated camera. Rotation is a world->camera axis-angle vector."""
    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _vec3(self.rotation, f"camera '{self.name}' rotation"))
        object.__setattr__(self, "translation", _vec3(self.translation, f"camera '{self.name}' translation"))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera '{self.name}': focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"camera '{self.name}': image size must be positive")

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_rotvec(self.rotation).as_matrix()

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_matrix.T @ np.asarray(self.translation)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "k1": self.k1,
            "k2": self.k2,
            "rotation_axis_angle": list(self.rotation),
            "translation": list(self.translation),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Camera":
        missing = [k for k in RIG_FIELDS if k not in data and k not in ("k1", "k2")]
        if missing:
            raise ValueError(f"camera entry is missing {', '.join(missing)}")
        return cls(
            name=str(data["name"]),
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            rotation=data["rotation_axis_angle"],
            translation=data["translation"],
            width=int(data["width"]),
            height=int(data["height"]),
            k1=float(data.get("k1", 0.0)),
            k2=float(data.get("k2", 0.0)),
        )


@dataclass(frozen=True)
class ExtrinsicDelta:
    """Learnable extrinsic increment: left-multiplied rotation plus additive translation."""
    d_rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    d_translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "d_rotation", _vec3(self.d_rotation, "delta rotation"))
        object.__setattr__(self, "d_translation", _vec3(self.d_translation, "delta translation"))

    def as_vector(self) -> np.ndarray:
        return np.array(self.d_rotation + self.d_translation)

    @classmethod
    def from_vector(cls, vec) -> "ExtrinsicDelta":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape != (6,):
            raise ShapeError(f"extrinsic delta needs 6 values, got {vec.size}")
        return cls(vec[:3], vec[3:])


@dataclass(frozen=True)
class CameraRig:
    """An ordered, immutable set of uniquely named cameras."""
    cameras: tuple[Camera, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("a camera rig needs at least one camera")
        index = {}
        for i, cam in enumerate(self.cameras):
            if cam.name in index:
                raise ValueError(f"duplicate camera name '{cam.name}'")
            index[cam.name] = i
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(cam.name for cam in self.cameras)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"camera '{name}' is not in the rig") from None

    def select(self, names) -> "CameraRig":
        """Sub-rig in the order of ``names``."""
        return CameraRig(tuple(self.cameras[self.index(n)] for n in names))

    @property
    def rotations(self) -> np.ndarray:
        return np.stack([cam.rotation_matrix for cam in self.cameras])

    @property
    def translations(self) -> np.ndarray:
        return np.array([cam.translation for cam in self.cameras])

    def intrinsics(self) -> dict[str, np.ndarray]:
        return {
            key: np.array([getattr(cam, key) for cam in self.cameras])
            for key in ("fx", "fy", "cx", "cy", "k1", "k2")
        }

    def with_deltas(self, deltas) -> "CameraRig":
        """Bake a ``(C, 6)`` block of extrinsic deltas into the rig."""
        deltas = np.asarray(deltas, dtype=np.float64)
        if deltas.shape != (len(self), 6):
            raise ShapeError(f"rig deltas must be ({len(self)}, 6), got {deltas.shape}")
        return CameraRig(tuple(
            compose_extrinsic_delta(cam, ExtrinsicDelta.from_vector(d))
            for cam, d in zip(self.cameras, deltas)
        ))


def _distort_and_scale(x, y, z, fx, fy, cx, cy, k1, k2):
    u = x / z
    v = y / z
    r2 = u * u + v * v
    factor = 1.0 + k1 * r2 + k2 * (r2 * r2)
    return ad.stack([fx * (u * factor) + cx, fy * (v * factor) + cy], axis=-1)


def project(camera: Camera, delta: ExtrinsicDelta | None, point) -> np.ndarray:
    """Pixel coordinates of one world point. Raises BehindCameraError for depth <= 0."""
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (3,):
        raise ShapeError(f"point must be a 3-vector, got shape {point.shape}")
    if not np.all(np.isfinite(point)):
        raise ValueError("point must be finite")
    if delta is not None:
        camera = compose_extrinsic_delta(camera, delta)
    p = camera.rotation_matrix @ point + np.asarray(camera.translation)
    if p[2] <= 0:
        raise BehindCameraError(f"point {point.tolist()} is behind camera '{camera.name}' (depth {p[2]:.4g})")
    return _distort_and_scale(p[0], p[1], p[2], camera.fx, camera.fy, camera.cx, camera.cy, camera.k1, camera.k2)


def project_points(rig: CameraRig, points, deltas=None):
    """
    Project markers into every camera of the rig.

    Args:
        rig: Cameras in observation order.
        points: ``(B, J, 3)`` world points, plain or traced.
        deltas: Optional ``(C, 6)`` extrinsic deltas ``[d_rot, d_t]``,
            plain or traced.

    Returns:
        ``(pixels, in_front)``: pixels ``(B, J, C, 2)`` and a boolean
        ``(B, J, C)`` mask of positive depth. Pixels of points behind a camera
        are computed at unit depth and must be given zero weight.
    """
    if ad.value_of(points).ndim != 3 or ad.value_of(points).shape[-1] != 3:
        raise ShapeError(f"points must be (B, J, 3), got {ad.value_of(points).shape}")
    rotations = rig.rotations
    translation = rig.translations
    if deltas is not None:
        if ad.value_of(deltas).shape != (len(rig), 6):
            raise ShapeError(f"rig deltas must be ({len(rig)}, 6)")
        # compose per camera before touching the (B, J) points
        rotations = ad.matmul(ad.rodrigues(deltas[:, :3]), rotations)
        translation = translation + deltas[:, 3:]
    cam_points = ad.einsum("cij,bkj->bkci", rotations, points)
    cam_points = cam_points + translation

    z = cam_points[..., 2]
    in_front = ad.value_of(z) > 0.0
    z_safe = ad.where(in_front, z, 1.0)
    k = rig.intrinsics()
    pixels = _distort_and_scale(
        cam_points[..., 0], cam_points[..., 1], z_safe,
        k["fx"], k["fy"], k["cx"], k["cy"], k["k1"], k["k2"],
    )
    return pixels, in_front


def compose_extrinsic_delta(camera: Camera, delta: ExtrinsicDelta) -> Camera:
    """A camera whose extrinsics already include ``delta``."""
    d_rot = Rotation.from_rotvec(delta.d_rotation)
    rotation = (d_rot * Rotation.from_rotvec(camera.rotation)).as_rotvec()
    translation = np.asarray(camera.translation) + np.asarray(delta.d_translation)
    return Camera(
        name=camera.name,
        fx=camera.fx,
        fy=camera.fy,
        cx=camera.cx,
        cy=camera.cy,
        rotation=rotation,
        translation=translation,
        width=camera.width,
        height=camera.height,
        k1=camera.k1,
        k2=camera.k2,
    )


def delta_report(rig: CameraRig, deltas) -> list[dict]:
    """Per-camera size of the applied deltas: rotation in degrees, translation in millimeters."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(len(rig), 6)
    report = []
    for cam, d in zip(rig.cameras, deltas):
        report.append({
            "name": cam.name,
            "rotation_deg": float(np.degrees(np.linalg.norm(d[:3]))),
            "translation_mm": float(1000.0 * np.linalg.norm(d[3:])),
            "d_rotation": d[:3].tolist(),
            "d_translation": d[3:].tolist(),
        })
    return report


def rig_from_json(text: str) -> CameraRig:
    data = json.loads(text)
    if isinstance(data, dict):
        data = data.get("cameras")
    if not isinstance(data, list):
        raise ValueError("rig file must hold an array of cameras")
    return CameraRig(tuple(Camera.from_dict(entry) for entry in data))


def rig_to_json(rig: CameraRig) -> str:
    return json.dumps([cam.to_dict() for cam in rig.cameras], indent=2)


def load_rig(path) -> CameraRig:
    rig = rig_from_json(Path(path).read_text())
    logger.debug("loaded rig %s with %d cameras", path, len(rig))
    return rig


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(rig_to_json(rig) + "\n")
