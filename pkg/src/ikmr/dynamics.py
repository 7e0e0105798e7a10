"""Dynamics-feasibility filter, violation reports and tracking rewards.

Each joint is reduced to its signed twist angle about the skeleton's dominant
axis. A joint trajectory that already meets the position, velocity and
acceleration limits (to within ``TOL``) is left untouched; any other joint is
clamped, rate limited and acceleration limited, and only the frames whose
angle changed are written back into the quaternions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import quat as Q
from .errors import InvalidGamma, LengthMismatch, LimitsMismatch, NonPositiveSigma, ValidationError
from .kinematics import fk
from .skeleton import FORMAT_VERSION, MotionClip, SkeletonTopology, dumps, load_json, write_text

TOL = 1e-9
DEFAULT_GAMMA = 0.99
DEFAULT_SIGMA_JPOS = 0.5
_RESERVED = ("format_version", "v_max", "a_max", "ground_height")


@dataclass(frozen=True)
class DynamicsLimits:
    """Per-joint angle bounds (radians) plus global rate, acceleration and ground limits.

    Joints without an entry in ``bounds`` have no position limit; the velocity
    and acceleration limits apply to every joint.
    """

    bounds: dict = field(default_factory=dict)
    v_max: float = 5.0
    a_max: float = 30.0
    ground_height: float = 0.0

    def __post_init__(self):
        clean = {}
        for name, (lo, hi) in self.bounds.items():
            lo, hi = float(lo), float(hi)
            if not lo < hi:
                raise ValidationError(f"joint {name!r}: lo must be < hi")
            clean[name] = (lo, hi)
        object.__setattr__(self, "bounds", clean)
        if not (self.v_max > 0 and self.a_max > 0):
            raise ValidationError("v_max and a_max must be positive")
        if not math.isfinite(self.ground_height):
            raise ValidationError("ground_height must be finite")

    def check(self, skeleton: SkeletonTopology):
        unknown = [n for n in self.bounds if n not in skeleton.joint_names]
        if unknown:
            raise LimitsMismatch(f"limits name joints missing from {skeleton.name!r}: {unknown}")

    def joint_bounds(self, skeleton: SkeletonTopology):
        """Arrays ``lo, hi`` of length J, infinite where a joint is unbounded."""
        self.check(skeleton)
        lo = np.full(skeleton.num_joints, -np.inf)
        hi = np.full(skeleton.num_joints, np.inf)
        for name, (a, b) in self.bounds.items():
            j = skeleton.joint_names.index(name)
            lo[j], hi[j] = a, b
        return lo, hi


def limits_to_dict(limits: DynamicsLimits) -> dict:
    d = {"format_version": FORMAT_VERSION}
    for name, (lo, hi) in limits.bounds.items():
        d[name] = {"lo": lo, "hi": hi}
    d.update(v_max=limits.v_max, a_max=limits.a_max, ground_height=limits.ground_height)
    return d


def limits_from_dict(d: dict) -> DynamicsLimits:
    if not isinstance(d, dict) or d.get("format_version") != FORMAT_VERSION:
        raise ValidationError("unsupported limits format_version")
    try:
        bounds = {k: (v["lo"], v["hi"]) for k, v in d.items() if k not in _RESERVED}
        return DynamicsLimits(bounds, float(d["v_max"]), float(d["a_max"]), float(d.get("ground_height", 0.0)))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed limits file: {exc!r}") from exc


def save_limits(limits: DynamicsLimits, path):
    write_text(path, dumps(limits_to_dict(limits), indent=2))


def load_limits(path) -> DynamicsLimits:
    return limits_from_dict(load_json(path))


def default_limits() -> DynamicsLimits:
    from .resources import config_path

    return load_limits(config_path("toy-robot-limits.json"))


# ------------------------------------------------------------ angle stages


def joint_angles(skeleton: SkeletonTopology, clip: MotionClip) -> np.ndarray:
    """T x J twist angles, unwrapped along time."""
    return np.unwrap(Q.twist_angle(clip.rotations, np.asarray(skeleton.axes)), axis=0)


def clamp_angles(theta, lo, hi):
    """Stage 1: clip to ``[lo, hi]``; a non-expansive map in the max norm."""
    return np.clip(theta, lo, hi)


def rate_limit(theta, max_step):
    """Stage 2: causal limiter, ``|y_t - y_{t-1}| <= max_step`` (radians per frame).

    Samples already within reach of the previous output are copied exactly.
    """
    x = np.asarray(theta, dtype=np.float64)
    y = x.copy()
    for t in range(1, len(x)):
        d = x[t] - y[t - 1]
        if abs(d) > max_step:
            y[t] = y[t - 1] + math.copysign(max_step, d)
    return y


def braking_reach(gap, A, horizon):
    """Largest step ``v`` with ``sum_{k=0..horizon} max(v - kA, 0) <= gap``.

    That sum is the distance covered while decelerating at ``A`` per frame over
    the remaining ``horizon`` frames, so the trajectory can stop within ``gap``.
    """
    if not math.isfinite(gap):
        return math.inf
    gap = max(gap, 0.0)
    n = int((math.sqrt(1.0 + 8.0 * gap / A) - 1.0) / 2.0)
    while n > 0 and A * n * (n + 1) / 2 > gap:
        n -= 1
    while A * (n + 1) * (n + 2) / 2 <= gap:
        n += 1
    m = min(n, horizon)
    return (gap + A * m * (m + 1) / 2) / (m + 1)


def _accel_pass(x, lo, hi, V, A):
    y = np.empty_like(x)
    y[0] = x[0]
    T = len(x)
    v_prev = None
    for t in range(1, T):
        horizon = T - 1 - t
        upper = min(V, braking_reach(hi - y[t - 1], A, horizon))
        lower = max(-V, -braking_reach(y[t - 1] - lo, A, horizon))
        if v_prev is not None:
            upper = min(upper, v_prev + A)
            lower = max(lower, v_prev - A)
        v = min(max(x[t] - y[t - 1], lower), upper)
        y[t] = y[t - 1] + v
        v_prev = v
    return y


def accel_limit(theta, lo, hi, max_step, max_accel):
    """Stage 3: forward and time-reversed limited trackers, averaged.

    Each pass keeps ``|dy| <= max_step``, ``|d2y| <= max_accel`` (per frame and
    per frame squared) and stays in ``[lo, hi]`` by only taking steps it can
    brake from before the bound. The constraint set is convex, so the average
    of the two passes satisfies it too and carries no net phase lag.
    """
    x = np.asarray(theta, dtype=np.float64)
    if len(x) < 3:
        return x.copy()
    fwd = _accel_pass(x, lo, hi, max_step, max_accel)
    bwd = _accel_pass(x[::-1], lo, hi, max_step, max_accel)[::-1]
    return 0.5 * (fwd + bwd)


def _excess(values, limit):
    over = np.abs(values) - limit
    return over[over > TOL]


def _angle_excess(theta, lo, hi, fps, limits):
    pos = np.maximum(theta - hi, lo - theta)
    pos = pos[pos > TOL]
    vel = _excess(np.diff(theta, axis=0) * fps, limits.v_max)
    acc = _excess(np.diff(theta, n=2, axis=0) * fps * fps, limits.a_max)
    return pos, vel, acc


def _ground_excess(skeleton, clip, ground):
    feet = list(skeleton.foot_joints)
    if not feet:
        return np.zeros(0), np.zeros(clip.num_frames)
    low = fk(skeleton, clip)[:, feet, 2].min(axis=1)
    gap = ground - low
    return gap[gap > TOL], gap


# ------------------------------------------------------------------ filter


def dynamics_filter(skeleton: SkeletonTopology, clip: MotionClip, limits: DynamicsLimits) -> MotionClip:
    """Project a clip onto the joint-limit, rate, acceleration and ground constraints."""
    clip.check_skeleton(skeleton)
    lo, hi = limits.joint_bounds(skeleton)
    fps = clip.fps
    V, A = limits.v_max / fps, limits.a_max / (fps * fps)
    theta = joint_angles(skeleton, clip)
    rot = clip.rotations
    root = clip.root_translation
    for j in range(skeleton.num_joints):
        if not any(e.size for e in _angle_excess(theta[:, j], lo[j], hi[j], fps, limits)):
            continue
        new = accel_limit(rate_limit(clamp_angles(theta[:, j], lo[j], hi[j]), V), lo[j], hi[j], V, A)
        changed = new != theta[:, j]
        if changed.any():
            if rot is clip.rotations:
                rot = rot.copy()
            rot[changed, j] = Q.set_twist_angle(rot[changed, j], skeleton.axes[j], new[changed])
    out = clip if rot is clip.rotations else MotionClip(clip.skeleton, fps, root, rot)
    bad, gap = _ground_excess(skeleton, out, limits.ground_height)
    if bad.size:
        root = root.copy()
        lift = gap > TOL
        root[lift, 2] = root[lift, 2] + gap[lift]
        out = MotionClip(clip.skeleton, fps, root, out.rotations)
    return out


@dataclass(frozen=True)
class FeasibilityReport:
    position_count: int = 0
    position_max: float = 0.0
    velocity_count: int = 0
    velocity_max: float = 0.0
    acceleration_count: int = 0
    acceleration_max: float = 0.0
    ground_count: int = 0
    ground_max: float = 0.0

    @property
    def is_zero(self) -> bool:
        return not (self.position_count or self.velocity_count or self.acceleration_count or self.ground_count)

    def to_dict(self) -> dict:
        return {
            "position": {"count": self.position_count, "max": self.position_max},
            "velocity": {"count": self.velocity_count, "max": self.velocity_max},
            "acceleration": {"count": self.acceleration_count, "max": self.acceleration_max},
            "ground": {"count": self.ground_count, "max": self.ground_max},
        }


def feasibility_report(skeleton: SkeletonTopology, clip: MotionClip, limits: DynamicsLimits) -> FeasibilityReport:
    """Count limit violations beyond ``TOL``; magnitudes are the largest excess per family."""
    clip.check_skeleton(skeleton)
    lo, hi = limits.joint_bounds(skeleton)
    theta = joint_angles(skeleton, clip)
    pos, vel, acc = _angle_excess(theta, lo, hi, clip.fps, limits)
    ground, _ = _ground_excess(skeleton, clip, limits.ground_height)

    def mx(a):
        return float(a.max()) if a.size else 0.0

    return FeasibilityReport(pos.size, mx(pos), vel.size, mx(vel), acc.size, mx(acc), ground.size, mx(ground))


def merge_reports(reports) -> FeasibilityReport:
    reports = list(reports)
    kw = {}
    for fam in ("position", "velocity", "acceleration", "ground"):
        kw[f"{fam}_count"] = sum(getattr(r, f"{fam}_count") for r in reports)
        kw[f"{fam}_max"] = max((getattr(r, f"{fam}_max") for r in reports), default=0.0)
    return FeasibilityReport(**kw)


# ----------------------------------------------------------------- rewards


def tracking_reward(q, q_hat, sigma_jpos: float = DEFAULT_SIGMA_JPOS) -> float:
    """``exp(-|q - q_hat|^2 / sigma_jpos)``."""
    if not sigma_jpos > 0:
        raise NonPositiveSigma(f"sigma_jpos must be > 0, got {sigma_jpos}")
    q = np.asarray(q, dtype=np.float64).ravel()
    q_hat = np.asarray(q_hat, dtype=np.float64).ravel()
    if q.shape != q_hat.shape:
        raise LengthMismatch(f"joint vectors differ in length: {q.size} vs {q_hat.size}")
    d = q - q_hat
    return float(np.exp(-np.dot(d, d) / sigma_jpos))


def discounted_return(rewards, gamma: float = DEFAULT_GAMMA) -> float:
    """``sum_t gamma^t r_t``, evaluated by Horner's rule from the end."""
    if not 0.0 <= gamma < 1.0:
        raise InvalidGamma(f"gamma must lie in [0, 1), got {gamma}")
    total = 0.0
    for r in reversed(list(rewards)):
        total = float(r) + gamma * total
    return total


@dataclass(frozen=True)
class RewardTrace:
    rewards: tuple
    gamma: float = DEFAULT_GAMMA
    sigma_jpos: float = DEFAULT_SIGMA_JPOS

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidGamma(f"gamma must lie in [0, 1), got {self.gamma}")
        if not self.sigma_jpos > 0:
            raise NonPositiveSigma(f"sigma_jpos must be > 0, got {self.sigma_jpos}")
        if any(not 0.0 < r <= 1.0 for r in self.rewards):
            raise ValidationError("rewards must lie in (0, 1]")

    @property
    def total(self) -> float:
        return discounted_return(self.rewards, self.gamma)


def reward_trace(q_seq, q_ref_seq, gamma=DEFAULT_GAMMA, sigma_jpos=DEFAULT_SIGMA_JPOS) -> RewardTrace:
    """Per-frame tracking rewards of joint vectors ``q_seq`` against ``q_ref_seq``."""
    if len(q_seq) != len(q_ref_seq):
        raise LengthMismatch("sequences differ in length")
    r = tuple(tracking_reward(a, b, sigma_jpos) for a, b in zip(q_seq, q_ref_seq))
    return RewardTrace(r, gamma, sigma_jpos)
