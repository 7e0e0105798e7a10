"""Smoothness, noise-robustness and latent-similarity metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from . import quat as Q
from .errors import ShapeMismatch, TooShort, ValidationError, ZeroVariance
from .kinematics import fk
from .nets import RetargetModel, encode, retarget_batch
from .skeleton import MotionClip, dumps


@dataclass(frozen=True)
class SmoothnessReport:
    mean_acc: float
    mean_jerk: float

    def __post_init__(self):
        if self.mean_acc < 0 or self.mean_jerk < 0:
            raise ValidationError("smoothness values must be non-negative")


def mean_angular_acc_jerk(clip: MotionClip) -> SmoothnessReport:
    """Mean angular acceleration and jerk over joints and frames.

    Angular speed is the geodesic angle between consecutive frames times fps;
    acceleration and jerk are absolute forward differences of it, each scaled
    by fps again.
    """
    if clip.num_frames < 4:
        raise TooShort(f"need at least 4 frames, got {clip.num_frames}")
    rot = clip.rotations
    omega = Q.quat_geodesic_angle(rot[:-1], rot[1:]) * clip.fps
    acc = np.diff(omega, axis=0) * clip.fps
    jerk = np.diff(acc, axis=0) * clip.fps
    return SmoothnessReport(float(np.mean(np.abs(acc))), float(np.mean(np.abs(jerk))))


def mean_smoothness(clips) -> SmoothnessReport:
    """Average of the per-clip reports."""
    reps = [mean_angular_acc_jerk(c) for c in clips]
    if not reps:
        raise ValidationError("no clips")
    return SmoothnessReport(float(np.mean([r.mean_acc for r in reps])), float(np.mean([r.mean_jerk for r in reps])))


def _key(positions, key_joints):
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 3 or positions.shape[-1] != 3:
        raise ShapeMismatch(f"positions must be T x J x 3, got {positions.shape}")
    key_joints = list(key_joints)
    if not key_joints or min(key_joints) < 0 or max(key_joints) >= positions.shape[1]:
        raise ValidationError(f"key joints {key_joints} out of range for {positions.shape[1]} joints")
    return positions[:, key_joints]


def akte(positions_test, positions_ref, key_joints) -> float:
    """Mean Euclidean distance over frames and key joints."""
    a, b = np.asarray(positions_test), np.asarray(positions_ref)
    if a.shape != b.shape:
        raise ShapeMismatch(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    d = _key(a, key_joints) - _key(b, key_joints)
    return float(np.mean(np.linalg.norm(d, axis=-1)))


def akja(positions, key_joints, fps: float) -> float:
    """Mean norm of the second central difference times fps^2, interior frames only."""
    p = _key(positions, key_joints)
    if p.shape[0] < 3:
        raise TooShort(f"need at least 3 frames, got {p.shape[0]}")
    d2 = p[2:] - 2.0 * p[1:-1] + p[:-2]
    return float(np.mean(np.linalg.norm(d2, axis=-1)) * fps * fps)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch("vectors differ in length")
    xc, yc = x - x.mean(), y - y.mean()
    nx, ny = np.linalg.norm(xc), np.linalg.norm(yc)
    if nx == 0.0 or ny == 0.0:
        raise ZeroVariance("constant vector has no correlation")
    return float(np.clip(np.dot(xc, yc) / (nx * ny), -1.0, 1.0))


def correlation_matrix(rows_a, rows_b) -> np.ndarray:
    return np.array([[pearson(a, b) for b in rows_b] for a in rows_a])


def latent_correlation_matrix(model: RetargetModel, pairs) -> np.ndarray:
    """Entry (i, j): Pearson correlation of encode_A(a_i) and encode_B(b_j), flattened."""
    pairs = list(pairs.pairs if hasattr(pairs, "pairs") else pairs)
    if len(pairs) < 2:
        raise ValidationError("need at least two pairs")
    za = [encode(model, "A", a).values.ravel() for a, _ in pairs]
    zb = [encode(model, "B", b).values.ravel() for _, b in pairs]
    return correlation_matrix(za, zb)


def diagonal_contrast(m) -> tuple[float, float]:
    """Mean diagonal and mean off-diagonal entries."""
    m = np.asarray(m)
    off = ~np.eye(len(m), dtype=bool)
    return float(np.mean(np.diag(m))), float(np.mean(m[off]))


@dataclass(frozen=True)
class NoiseSweepPoint:
    noise_std: float
    akte: float
    akja: float
    source_akja: float

    def __post_init__(self):
        if self.akte < 0 or self.akja < 0 or self.source_akja < 0:
            raise ValidationError("sweep metrics must be non-negative")


def noise_sweep(model: RetargetModel, clips_A, noise_levels, seed: int, workers: int = 1) -> list[NoiseSweepPoint]:
    """Retarget clean and root-jittered clips and compare their key-joint trajectories.

    One standard-normal draw per clip is scaled by each level, so every level
    sees the same noise shape and a zero level reproduces the clean input.
    ``source_akja`` is the acceleration of the noisy source root path.
    """
    clips_A = list(clips_A)
    levels = [float(s) for s in noise_levels]
    if not clips_A:
        raise ValidationError("no clips")
    if any(s < 0 for s in levels) or levels != sorted(levels):
        raise ValidationError("noise levels must be non-negative and ascending")
    skB = model.skeletons["B"]
    keys = skB.key_joint_indices
    rng = np.random.default_rng(seed)
    base = [rng.standard_normal(c.root_translation.shape) for c in clips_A]
    clean = [fk(skB, c) for c in retarget_batch(model, clips_A, workers)]
    out = []
    for s in levels:
        noisy_in = [MotionClip(c.skeleton, c.fps, c.root_translation + s * n, c.rotations) for c, n in zip(clips_A, base)]
        noisy = [fk(skB, c) for c in retarget_batch(model, noisy_in, workers)]
        e = np.mean([akte(p, q, keys) for p, q in zip(noisy, clean)])
        j = np.mean([akja(p, keys, c.fps) for p, c in zip(noisy, clips_A)])
        src = np.mean([akja(c.root_translation[:, None], [0], c.fps) for c in noisy_in])
        out.append(NoiseSweepPoint(s, float(e), float(j), float(src)))
    return out


SWEEP_COLUMNS = ("noise_std", "akte", "akja", "source_akja")


def sweep_to_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for p in points:
        w.writerow([repr(float(getattr(p, k))) for k in SWEEP_COLUMNS])
    return buf.getvalue()


def sweep_from_csv(text: str) -> list[NoiseSweepPoint]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != SWEEP_COLUMNS:
        raise ValidationError("unexpected sweep CSV header")
    return [NoiseSweepPoint(*map(float, r)) for r in rows[1:]]


def sweep_to_json(points) -> str:
    return dumps([asdict(p) for p in points], indent=2)
