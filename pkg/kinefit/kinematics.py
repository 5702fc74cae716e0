"""Differentiable forward kinematics ``x = M(theta, beta)``.

All functions accept plain arrays or traced :class:`~kinefit.autodiff.Var`
values and are batched over leading pose dimensions.

Conventions: a body's joint rotation applies about the body origin after
its scaled attachment offset; a body's scale factor multiplies both its
attachment offset and its sites' ``local_pos + offset``. Free-joint
translations are expressed in the parent frame (the world for the root) and
are not scaled.
"""

import numpy as np

from . import autodiff as ad
from .exceptions import NonFiniteError, ShapeError
from .model import SkeletonModel, SubjectParams, body_scales

# tanh saturates to exactly 1.0 in float64; keep squashed poses strictly inside
# their joint range.
SQUASH_LIMIT = 1.0 - 1e-12

Pose = np.ndarray
MarkerSet = np.ndarray


def _as_batch(pose):
    single = ad.value_of(pose).ndim == 1
    if single:
        pose = ad.reshape(pose, (1, -1))
    return pose, single


def _body_factors(model: SkeletonModel, scales):
    if isinstance(scales, ad.Var):
        logs = ad.reshape(ad.log(scales), (model.n_scales, 1))
        return ad.reshape(ad.exp(ad.matmul(model.scale_map.matrix, logs)), (model.n_bodies,))
    return body_scales(model, scales)


def _skew_const(axis) -> np.ndarray:
    x, y, z = axis
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _axis_rotation(angle, axis):
    """Rotation by ``angle`` (B,) about a fixed unit axis: ``I + sin K + (1 - cos) K^2``."""
    k = _skew_const(axis)
    s = ad.reshape(ad.sin(angle), (-1, 1, 1))
    c = ad.reshape(1.0 - ad.cos(angle), (-1, 1, 1))
    return np.eye(3) + s * k + c * (k @ k)


def _body_motion(model: SkeletonModel, body: int, pose):
    """Joint rotation ``(B, 3, 3)`` and translation ``(B, 3)`` of one body, or None."""
    rotation, translation = None, None
    for joint, start in model.joints_of(body):
        if joint.kind == "hinge":
            r = _axis_rotation(pose[:, start], joint.axis)
        elif joint.kind == "ball":
            r = ad.rodrigues(pose[:, start:start + 3])
        else:
            translation = pose[:, start:start + 3]
            r = ad.rodrigues(pose[:, start + 3:start + 6])
        rotation = r if rotation is None else ad.matmul(rotation, r)
    return rotation, translation


def marker_positions(model: SkeletonModel, pose, scales, site_offsets, site_positions=None):
    """
    World-frame site positions for a batch of poses.

    Args:
        model: Skeleton to evaluate.
        pose: ``(n_dof,)`` or ``(B, n_dof)`` pose coordinates.
        scales: ``(n_scales,)`` positive scale parameters.
        site_offsets: ``(J, 3)`` body-frame site offsets in meters.
        site_positions: Optional ``(J, 3)`` override of the base site
            positions (traced during trilevel fitting).

    Returns:
        ``(J, 3)`` or ``(B, J, 3)`` marker positions, matching the pose batch.
    """
    pose, single = _as_batch(pose)
    batch, n_dof = ad.value_of(pose).shape
    if n_dof != model.n_dof:
        raise ShapeError(f"pose has {n_dof} coordinates, model expects {model.n_dof}")
    if ad.value_of(site_offsets).shape != (model.n_sites, 3):
        raise ShapeError(f"site offsets must be ({model.n_sites}, 3)")

    factors = _body_factors(model, scales)
    identity = np.broadcast_to(np.eye(3), (batch, 3, 3))
    rotations, origins = [], []
    for b, body in enumerate(model.bodies):
        rotation, translation = _body_motion(model, b, pose)
        offset = factors[b] * model.attach_offsets[b]
        if body.parent is None:
            world_rot = identity if rotation is None else rotation
            # the root sits at the world origin plus its free translation
            origin = np.zeros((batch, 3)) if translation is None else translation
        else:
            parent_rot, parent_origin = rotations[body.parent], origins[body.parent]
            local = offset if translation is None else offset + translation
            if ad.value_of(local).ndim == 1:
                moved = ad.einsum("bij,j->bi", parent_rot, local)
            else:
                moved = ad.einsum("bij,bj->bi", parent_rot, local)
            origin = parent_origin + moved
            world_rot = parent_rot if rotation is None else ad.matmul(parent_rot, rotation)
        rotations.append(world_rot)
        origins.append(origin)

    base = model.site_positions if site_positions is None else site_positions
    site_bodies = model.site_bodies
    scaled_local = ad.reshape(factors[site_bodies], (-1, 1)) * (base + site_offsets)
    site_rot = ad.stack(rotations, axis=1)[:, site_bodies]
    site_origin = ad.stack(origins, axis=1)[:, site_bodies]
    markers = ad.einsum("bjik,jk->bji", site_rot, scaled_local) + site_origin
    return markers[0] if single else markers


def forward_kinematics(model: SkeletonModel, pose, subject: SubjectParams) -> MarkerSet:
    """Marker positions ``x = M(theta, beta)`` for plain (untraced) inputs."""
    subject.validate(model)
    pose = np.asarray(pose, dtype=np.float64)
    if not np.all(np.isfinite(pose)):
        raise NonFiniteError("pose contains non-finite values")
    return marker_positions(model, pose, subject.scales, subject.site_offsets)


def body_transforms(model: SkeletonModel, pose, subject: SubjectParams) -> tuple[np.ndarray, np.ndarray]:
    """World rotations ``(B, nb, 3, 3)`` and origins ``(B, nb, 3)`` of every body."""
    pose, single = _as_batch(np.asarray(pose, dtype=np.float64))
    batch = pose.shape[0]
    factors = body_scales(model, subject.scales)
    rotations = np.zeros((batch, model.n_bodies, 3, 3))
    origins = np.zeros((batch, model.n_bodies, 3))
    for b, body in enumerate(model.bodies):
        rotation, translation = _body_motion(model, b, pose)
        rotation = np.broadcast_to(np.eye(3), (batch, 3, 3)) if rotation is None else rotation
        local = factors[b] * model.attach_offsets[b] + (0.0 if translation is None else translation)
        if body.parent is None:
            rotations[:, b], origins[:, b] = rotation, local
        else:
            parent_rot = rotations[:, body.parent]
            rotations[:, b] = parent_rot @ rotation
            origins[:, b] = origins[:, body.parent] + np.einsum("bij,bj->bi", parent_rot, np.broadcast_to(local, (batch, 3)))
    if single:
        return rotations[0], origins[0]
    return rotations, origins


def squash_to_limits(raw, model: SkeletonModel):
    """
    Map unconstrained outputs into joint ranges.

    Bounded coordinates become ``mid + half_range * tanh(raw)``; unbounded
    ones (free-joint coordinates) pass through unchanged.
    """
    lo, hi, bounded = model.dof_bounds
    lo_f = np.where(bounded, lo, 0.0)
    hi_f = np.where(bounded, hi, 0.0)
    mid = 0.5 * (lo_f + hi_f)
    half = 0.5 * (hi_f - lo_f)
    squashed = mid + half * ad.clip(ad.tanh(raw), -SQUASH_LIMIT, SQUASH_LIMIT)
    return ad.where(bounded, squashed, raw)


def constraint_error(model: SkeletonModel, pose):
    """Violation ``eps_i = theta[a_i] - ratio_i * theta[b_i] - offset_i`` per constraint."""
    if not model.constraints:
        shape = ad.value_of(pose).shape[:-1] + (0,)
        return np.zeros(shape)
    pose, single = _as_batch(pose)
    a = np.array([c.dof_a for c in model.constraints])
    b = np.array([c.dof_b for c in model.constraints])
    ratio = np.array([c.ratio for c in model.constraints])
    offset = np.array([c.offset for c in model.constraints])
    eps = pose[:, a] - ratio * pose[:, b] - offset
    return eps[0] if single else eps
