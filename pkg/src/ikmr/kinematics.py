"""Forward kinematics from local rotations to world-frame joint positions."""

import numpy as np

from . import autodiff as ad
from . import quat as Q
from .errors import EmptyEndEffectorSet, SkeletonMismatch
from .skeleton import MotionClip, SkeletonTopology


def fk_arrays(skeleton: SkeletonTopology, rotations, root_translation):
    """FK on raw arrays: rotations (..., J, 4) unit, root_translation (..., 3)."""
    rotations = np.asarray(rotations, dtype=np.float64)
    root_translation = np.asarray(root_translation, dtype=np.float64)
    J = skeleton.num_joints
    if rotations.shape[-2:] != (J, 4) or root_translation.shape != rotations.shape[:-2] + (3,):
        raise SkeletonMismatch(
            f"rotations {rotations.shape} / root {root_translation.shape} do not fit {J}-joint skeleton"
        )
    lead = rotations.shape[:-2]
    glob = np.empty(lead + (J, 4))
    pos = np.empty(lead + (J, 3))
    for j in skeleton.order:
        p = skeleton.parent[j]
        if p < 0:
            glob[..., j, :] = rotations[..., j, :]
            pos[..., j, :] = root_translation
        else:
            glob[..., j, :] = Q.hamilton(glob[..., p, :], rotations[..., j, :])
            pos[..., j, :] = pos[..., p, :] + Q.quat_rotate(glob[..., p, :], skeleton.offset[j])
    return pos


def fk(skeleton: SkeletonTopology, clip: MotionClip) -> np.ndarray:
    """World joint positions, T x J x 3. Root joint sits at the root translation."""
    clip.check_skeleton(skeleton)
    return fk_arrays(skeleton, clip.rotations, clip.root_translation)


def fk_differentiable(skeleton: SkeletonTopology, rotations, root_translation) -> ad.Tensor:
    """FK as an autodiff graph. Rotation rows are normalized inside the graph.

    ``rotations`` is (..., T, J, 4) and ``root_translation`` (..., T, 3); the
    result is (..., T, J, 3).
    """
    rotations = ad.as_tensor(rotations)
    root_translation = ad.as_tensor(root_translation)
    J = skeleton.num_joints
    if rotations.shape[-2:] != (J, 4) or root_translation.shape != rotations.shape[:-2] + (3,):
        raise SkeletonMismatch(
            f"rotations {rotations.shape} / root {root_translation.shape} do not fit {J}-joint skeleton"
        )
    q = ad.normalize_last(rotations)
    frame_shape = root_translation.shape
    glob, pos = [None] * J, [None] * J
    for j in skeleton.order:
        p = skeleton.parent[j]
        qj = ad.take(q, j, axis=-2)
        if p < 0:
            glob[j] = qj
            pos[j] = root_translation
            continue
        off = ad.Tensor(np.broadcast_to(skeleton.offset[j], frame_shape))
        pos[j] = ad.add(pos[p], ad.qrotate(glob[p], off))
        if skeleton.children[j]:
            glob[j] = ad.qmul(glob[p], qj)
    return ad.stack(pos, axis=-2)


def end_effector_positions(skeleton: SkeletonTopology, clip: MotionClip) -> np.ndarray:
    """T x |EE| x 3 world positions of the end effectors, in declaration order."""
    if not skeleton.end_effectors:
        raise EmptyEndEffectorSet(f"skeleton {skeleton.name!r} declares no end effectors")
    return fk(skeleton, clip)[:, list(skeleton.end_effectors)]


def standing_height(skeleton: SkeletonTopology) -> float:
    """Root height that puts the lowest foot of the rest pose on z = 0."""
    feet = list(skeleton.foot_joints)
    if not feet:
        return 0.0
    rest = fk_arrays(skeleton, np.tile(Q.IDENTITY, (skeleton.num_joints, 1)), np.zeros(3))
    return float(-np.min(rest[feet, 2]))
