"""Quaternion algebra on numpy arrays.

All quaternions are stored as ``(w, x, y, z)`` in the last axis and follow the
Hamilton convention. Every function broadcasts over leading axes.
"""

import numpy as np

from .errors import ZeroQuaternion

ZERO_NORM = 1e-12
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def canonicalize(q):
    """Flip signs so that ``w >= 0`` (ties broken by the first nonzero of x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    lead = q[..., 0]
    for k in (1, 2, 3):
        lead = np.where(lead == 0.0, q[..., k], lead)
    sign = np.where(lead < 0.0, -1.0, 1.0)
    return q * sign[..., None]


def quat_normalize(q):
    """Return the unit, hemisphere-canonical version of ``q``.

    Raises:
        ZeroQuaternion: if any quaternion has norm <= 1e-12.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if np.any(n <= ZERO_NORM):
        raise ZeroQuaternion(f"cannot normalize quaternion with norm {np.min(n):.3g}")
    return canonicalize(q / n[..., None])


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def hamilton(a, b):
    """Raw Hamilton product without renormalization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul(a, b):
    """Hamilton product ``a * b``, renormalized to unit length and canonical sign."""
    return quat_normalize(hamilton(a, b))


def quat_rotate(q, v):
    """Rotate 3-vectors ``v`` by unit quaternions ``q``."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_geodesic_angle(a, b):
    """Rotation angle in ``[0, pi]`` between unit quaternions ``a`` and ``b``.

    Uses the atan2 form, which stays accurate near 0 and pi where ``acos`` does not.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = hamilton(quat_conj(a), b)
    s = np.linalg.norm(d[..., 1:], axis=-1)
    return 2.0 * np.arctan2(s, np.abs(d[..., 0]))


def from_axis_angle(axis, angle):
    """Quaternion rotating by ``angle`` radians about the unit ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def twist_angle(q, axis):
    """Signed rotation angle of the twist component of ``q`` about unit ``axis``."""
    q = np.asarray(q, dtype=np.float64)
    proj = np.sum(q[..., 1:] * np.asarray(axis, dtype=np.float64), axis=-1)
    return 2.0 * np.arctan2(proj, q[..., 0])


def set_twist_angle(q, axis, angle):
    """Replace the twist of ``q`` about ``axis`` by ``angle``, keeping the off-axis part.

    The twist magnitude ``sqrt(w^2 + (v.axis)^2)`` is kept, so a pure twist maps to
    ``from_axis_angle(axis, angle)`` and the result is renormalized.
    """
    q = np.asarray(q, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    proj = np.sum(q[..., 1:] * axis, axis=-1)
    r = np.sqrt(q[..., 0] ** 2 + proj**2)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    off = q[..., 1:] - proj[..., None] * axis
    out = np.concatenate([(r * np.cos(half))[..., None], off + (r * np.sin(half))[..., None] * axis], axis=-1)
    return quat_normalize(out)


def quat_log(q):
    """Rotation vector (axis * angle) of unit quaternions, angle in [0, pi]."""
    q = canonicalize(q)
    s = np.linalg.norm(q[..., 1:], axis=-1)
    angle = 2.0 * np.arctan2(s, q[..., 0])
    scale = np.where(s > 1e-15, angle / np.where(s > 1e-15, s, 1.0), 2.0)
    return q[..., 1:] * scale[..., None]


def quat_exp(rotvec):
    """Inverse of :func:`quat_log`."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    angle = np.linalg.norm(rotvec, axis=-1)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    k = np.where(angle > 1e-15, np.sin(half) / np.where(angle > 1e-15, angle, 1.0), 0.5)
    return canonicalize(np.concatenate([np.cos(half)[..., None], rotvec * k[..., None]], axis=-1))
