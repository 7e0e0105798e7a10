"""Skeleton topologies, motion clips, their JSON formats and windowing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import quat as Q
from .errors import FormatVersionError, InvalidMotion, InvalidSkeleton, SkeletonMismatch

FORMAT_VERSION = 1
UNIT_TOL = 1e-6
DEFAULT_WINDOW = 64
DEFAULT_FPS = 30.0
DEFAULT_OVERLAP = 8


def _frozen(a, shape_tail, what):
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail:
        raise InvalidSkeleton(f"{what} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PoolGroup:
    name: str
    joints: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    """Joint tree with rest offsets, end effectors and neighbourhood radius.

    ``parent[i] == -1`` marks the root. ``axes`` holds each joint's dominant
    rotation axis (used by the dynamics filter and the synthetic generator);
    ``feet`` and ``key_joints`` default to the end effectors and root + end
    effectors respectively. ``pooling`` optionally ships explicit pooling levels.
    """

    name: str
    joint_names: tuple[str, ...]
    parent: tuple[int, ...]
    offset: np.ndarray
    end_effectors: tuple[int, ...]
    neighbor_distance: int = 1
    axes: np.ndarray | None = None
    feet: tuple[int, ...] | None = None
    key_joints: tuple[int, ...] | None = None
    pooling: tuple[tuple[PoolGroup, ...], ...] | None = None
    _explicit: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        J = len(self.joint_names)
        if J < 1:
            raise InvalidSkeleton("skeleton needs at least one joint")
        if len(set(self.joint_names)) != J:
            raise InvalidSkeleton("joint names must be unique")
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "parent", tuple(int(p) for p in self.parent))
        object.__setattr__(self, "end_effectors", tuple(int(e) for e in self.end_effectors))
        object.__setattr__(self, "offset", _frozen(self.offset, (3,), "offset"))
        if len(self.parent) != J or self.offset.shape[0] != J:
            raise InvalidSkeleton("parent and offset lists must match the joint count")
        if self.neighbor_distance < 1:
            raise InvalidSkeleton("neighbor_distance must be >= 1")
        roots = [i for i, p in enumerate(self.parent) if p == -1]
        if len(roots) != 1:
            raise InvalidSkeleton(f"expected exactly one root, found {len(roots)}")
        for i, p in enumerate(self.parent):
            if p != -1 and not 0 <= p < J:
                raise InvalidSkeleton(f"joint {i} has out-of-range parent {p}")
            if p == i:
                raise InvalidSkeleton(f"joint {i} is its own parent")
        # acyclic + connected: every joint must reach the root within J hops
        for i in range(J):
            k, hops = i, 0
            while self.parent[k] != -1:
                k = self.parent[k]
                hops += 1
                if hops > J:
                    raise InvalidSkeleton(f"cycle through joint {i}")
        if np.any(self.offset[roots[0]] != 0.0):
            raise InvalidSkeleton("root offset must be the zero vector")
        children = self.children
        for e in self.end_effectors:
            if not 0 <= e < J:
                raise InvalidSkeleton(f"end effector {e} out of range")
            if children[e]:
                raise InvalidSkeleton(f"end effector {self.joint_names[e]} is not a leaf")
        if self.axes is None:
            axes = np.tile([0.0, 0.0, 1.0], (J, 1))
        else:
            axes = np.array(self.axes, dtype=np.float64)
            if axes.shape != (J, 3):
                raise InvalidSkeleton("axes must be J x 3")
            n = np.linalg.norm(axes, axis=1)
            if np.any(n < 1e-9):
                raise InvalidSkeleton("axes must be nonzero")
            axes = axes / n[:, None]
        axes.setflags(write=False)
        object.__setattr__(self, "axes", axes)
        for attr in ("feet", "key_joints"):
            v = getattr(self, attr)
            if v is not None:
                v = tuple(int(x) for x in v)
                if any(not 0 <= x < J for x in v):
                    raise InvalidSkeleton(f"{attr} index out of range")
                object.__setattr__(self, attr, v)

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def root(self) -> int:
        return self.parent.index(-1)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids = [[] for _ in self.joint_names]
        for i, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(i)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Joint indices with every parent before its children."""
        out, stack = [], [self.root]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(reversed(self.children[j]))
        return tuple(out)

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        """Sorted neighbour lists N_i: joints within graph distance d, self included."""
        return tree_adjacency(self.parent, self.neighbor_distance)

    @property
    def foot_joints(self) -> tuple[int, ...]:
        return self.feet if self.feet is not None else self.end_effectors

    @property
    def key_joint_indices(self) -> tuple[int, ...]:
        if self.key_joints is not None:
            return self.key_joints
        return (self.root,) + tuple(e for e in self.end_effectors if e != self.root)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise InvalidSkeleton(f"skeleton {self.name!r} has no joint {name!r}") from None


def tree_adjacency(parent, distance: int):
    J = len(parent)
    nbrs = [set() for _ in range(J)]
    for i, p in enumerate(parent):
        if p >= 0:
            nbrs[i].add(p)
            nbrs[p].add(i)
    out = []
    for i in range(J):
        seen, frontier = {i}, {i}
        for _ in range(distance):
            frontier = {k for j in frontier for k in nbrs[j]} - seen
            seen |= frontier
        out.append(tuple(sorted(seen)))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class MotionClip:
    """Root translations (T x 3) and local joint rotations (T x J x 4, w-first)."""

    skeleton: str
    fps: float
    root_translation: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        fps = float(self.fps)
        if not np.isfinite(fps) or fps <= 0:
            raise InvalidMotion("fps must be positive")
        object.__setattr__(self, "fps", fps)
        rt = np.array(self.root_translation, dtype=np.float64)
        rot = np.array(self.rotations, dtype=np.float64)
        if rt.ndim != 2 or rt.shape[1] != 3:
            raise InvalidMotion(f"root_translation must be T x 3, got {rt.shape}")
        if rot.ndim != 3 or rot.shape[2] != 4 or rot.shape[0] != rt.shape[0]:
            raise InvalidMotion(f"rotations must be T x J x 4 matching T={rt.shape[0]}, got {rot.shape}")
        if rt.shape[0] < 1:
            raise InvalidMotion("clip needs at least one frame")
        finite = np.isfinite(rt).all(axis=1) & np.isfinite(rot).all(axis=(1, 2))
        if not np.all(finite):
            raise InvalidMotion(f"non-finite values at frame {int(np.argmin(finite))}")
        bad = np.abs(np.linalg.norm(rot, axis=-1) - 1.0) > UNIT_TOL
        if np.any(bad):
            t, j = np.argwhere(bad)[0]
            raise InvalidMotion(f"non-unit quaternion at frame {t}, joint {j}")
        canon = np.all(Q.canonicalize(rot) == rot, axis=-1)
        if not np.all(canon):
            t, j = np.argwhere(~canon)[0]
            raise InvalidMotion(f"quaternion not hemisphere-canonical at frame {t}, joint {j}")
        rt.setflags(write=False)
        rot.setflags(write=False)
        object.__setattr__(self, "root_translation", rt)
        object.__setattr__(self, "rotations", rot)

    @property
    def num_frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def num_joints(self) -> int:
        return self.rotations.shape[1]

    @classmethod
    def from_raw(cls, skeleton, fps, root_translation, rotations):
        """Build a clip after normalizing arbitrary nonzero 4-vectors."""
        return cls(skeleton, fps, root_translation, Q.quat_normalize(rotations))

    def check_skeleton(self, skeleton: SkeletonTopology):
        if self.skeleton != skeleton.name:
            raise SkeletonMismatch(f"clip is on {self.skeleton!r}, expected {skeleton.name!r}")
        if self.num_joints != skeleton.num_joints:
            raise SkeletonMismatch(
                f"clip has {self.num_joints} joints, skeleton {skeleton.name!r} has {skeleton.num_joints}"
            )


# ---------------------------------------------------------------- JSON formats


def _check_version(d, what):
    v = d.get("format_version")
    if v != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported {what} format_version {v!r}")


def skeleton_to_dict(sk: SkeletonTopology) -> dict:
    joints = []
    for i, name in enumerate(sk.joint_names):
        j = {"name": name, "parent": sk.parent[i], "offset": [float(x) for x in sk.offset[i]]}
        if "axes" in sk._explicit:
            j["axis"] = [float(x) for x in sk.axes[i]]
        joints.append(j)
    d = {
        "format_version": FORMAT_VERSION,
        "name": sk.name,
        "joints": joints,
        "end_effectors": list(sk.end_effectors),
        "neighbor_distance": sk.neighbor_distance,
    }
    if sk.feet is not None:
        d["feet"] = list(sk.feet)
    if sk.key_joints is not None:
        d["key_joints"] = list(sk.key_joints)
    if sk.pooling is not None:
        d["pooling"] = [[{"name": g.name, "joints": list(g.joints)} for g in level] for level in sk.pooling]
    return d


def skeleton_from_dict(d: dict) -> SkeletonTopology:
    if not isinstance(d, dict):
        raise InvalidSkeleton("skeleton file must hold a JSON object")
    _check_version(d, "skeleton")
    try:
        joints = d["joints"]
        explicit = set()
        axes = None
        if any("axis" in j for j in joints):
            if not all("axis" in j for j in joints):
                raise InvalidSkeleton("either every joint or no joint declares an axis")
            axes = [j["axis"] for j in joints]
            explicit.add("axes")
        pooling = None
        if "pooling" in d:
            pooling = tuple(
                tuple(PoolGroup(str(g["name"]), tuple(str(n) for n in g["joints"])) for g in level)
                for level in d["pooling"]
            )
        return SkeletonTopology(
            name=str(d["name"]),
            joint_names=tuple(str(j["name"]) for j in joints),
            parent=tuple(int(j["parent"]) for j in joints),
            offset=[j["offset"] for j in joints],
            end_effectors=tuple(d["end_effectors"]),
            neighbor_distance=int(d.get("neighbor_distance", 1)),
            axes=axes,
            feet=d.get("feet"),
            key_joints=d.get("key_joints"),
            pooling=pooling,
            _explicit=frozenset(explicit),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidSkeleton(f"malformed skeleton: {exc!r}") from exc


def motion_to_dict(clip: MotionClip) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "skeleton": clip.skeleton,
        "fps": clip.fps,
        "root_translation": clip.root_translation.tolist(),
        "rotations": clip.rotations.tolist(),
    }


def motion_from_dict(d: dict) -> MotionClip:
    if not isinstance(d, dict):
        raise InvalidMotion("motion file must hold a JSON object")
    _check_version(d, "motion")
    try:
        return MotionClip(str(d["skeleton"]), d["fps"], d["root_translation"], d["rotations"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, InvalidMotion):
            raise
        raise InvalidMotion(f"malformed motion: {exc!r}") from exc


def dumps(obj, indent=None) -> str:
    return json.dumps(obj, indent=indent, allow_nan=False) + "\n"


def load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidMotion(f"{path}: invalid JSON ({exc})") from exc


def write_text(path, text):
    Path(path).write_text(text, encoding="utf-8")


def load_skeleton(path) -> SkeletonTopology:
    return skeleton_from_dict(load_json(path))


def save_skeleton(sk: SkeletonTopology, path):
    write_text(path, dumps(skeleton_to_dict(sk), indent=2))


def load_motion(path) -> MotionClip:
    return motion_from_dict(load_json(path))


def save_motion(clip: MotionClip, path):
    write_text(path, dumps(motion_to_dict(clip)))


# ------------------------------------------------------------------- windowing


def window_starts(length: int, window: int = DEFAULT_WINDOW, overlap: int = DEFAULT_OVERLAP):
    """Window start frames covering ``length`` frames; the last window ends flush."""
    if length <= window:
        return [0]
    step = window - overlap
    starts = list(range(0, length - window, step))
    starts.append(length - window)
    return starts


def split_windows(clip: MotionClip, window: int = DEFAULT_WINDOW, overlap: int = DEFAULT_OVERLAP):
    """Cut ``clip`` into fixed-length windows. Short clips are padded by holding the last frame."""
    T = clip.num_frames
    if T < window:
        pad = window - T
        rt = np.concatenate([clip.root_translation, np.repeat(clip.root_translation[-1:], pad, axis=0)])
        rot = np.concatenate([clip.rotations, np.repeat(clip.rotations[-1:], pad, axis=0)])
        return [MotionClip(clip.skeleton, clip.fps, rt, rot)], [0]
    starts = window_starts(T, window, overlap)
    out = [
        MotionClip(clip.skeleton, clip.fps, clip.root_translation[s : s + window], clip.rotations[s : s + window])
        for s in starts
    ]
    return out, starts


def blend_windows(windows, starts, length: int) -> MotionClip:
    """Reassemble windows, cross-fading overlaps linearly in quaternion log space."""
    first = windows[0]
    W = first.num_frames
    if length <= W:
        return MotionClip(first.skeleton, first.fps, first.root_translation[:length], first.rotations[:length])
    J = first.num_joints
    rt = np.zeros((length, 3))
    rot = np.zeros((length, J, 4))
    rt[: W] = first.root_translation
    rot[: W] = first.rotations
    end = W
    for win, s in zip(windows[1:], starts[1:]):
        ov = end - s
        # fade weight rises linearly across the overlap, excluding both endpoints
        alpha = (np.arange(ov) + 1.0) / (ov + 1.0)
        prev = rot[s:end]
        cur = win.rotations[:ov]
        mixed = (1.0 - alpha)[:, None, None] * Q.quat_log(prev) + alpha[:, None, None] * Q.quat_log(cur)
        rot[s:end] = Q.quat_normalize(Q.quat_exp(mixed))
        rt[s:end] = (1.0 - alpha)[:, None] * rt[s:end] + alpha[:, None] * win.root_translation[:ov]
        rot[end : s + W] = win.rotations[ov:]
        rt[end : s + W] = win.root_translation[ov:]
        end = s + W
    return MotionClip(first.skeleton, first.fps, rt, rot)
