"""Skeleton-aware convolution, pooling and the dual encoder/decoder."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quat as Q
from .autodiff import checkpoint
from .errors import (
    AdjacencyMismatch,
    IKMRError,
    IncompleteMap,
    ShapeMismatch,
    SkeletonMismatch,
    TopologyMismatch,
    ValidationError,
    WindowLengthMismatch,
)
from .kinematics import standing_height
from .skeleton import (
    FORMAT_VERSION,
    MotionClip,
    SkeletonTopology,
    blend_windows,
    skeleton_from_dict,
    skeleton_to_dict,
    split_windows,
    tree_adjacency,
)

SIDES = ("A", "B")
ROT_CH = 4
ROOT_CH = 3


@dataclass(frozen=True)
class ModelConfig:
    window: int = 64
    channels: tuple[int, int] = (32, 64)
    kernel: int = 5
    static_channels: int = 8
    negative_slope: float = 0.2
    fps: float = 30.0
    rest_anchor: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.window < 4 or self.window % 4:
            raise ValidationError(f"window must be a positive multiple of 4, got {self.window}")
        if len(self.channels) != 2 or min(self.channels) < 1:
            raise ValidationError("channels must be two positive ints")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel width must be odd")


# ----------------------------------------------------------------- pooling


@dataclass(frozen=True, eq=False)
class PoolingMap:
    """Surjective map from fine joints to coarse super-joints.

    ``groups[g]`` lists the fine joints of super-joint ``g``; each group must be a
    connected subtree of the fine tree described by ``fine_parent``.
    """

    names: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...]
    fine_parent: tuple[int, ...]
    owner: np.ndarray = field(init=False, repr=False)
    coarse_parent: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        J = len(self.fine_parent)
        owner = np.full(J, -1, dtype=np.int64)
        for g, members in enumerate(self.groups):
            if not members:
                raise IncompleteMap(f"super-joint {self.names[g]!r} is empty")
            for m in members:
                if not 0 <= m < J:
                    raise IncompleteMap(f"joint index {m} out of range")
                if owner[m] >= 0:
                    raise IncompleteMap(f"joint {m} assigned to two super-joints")
                owner[m] = g
        if np.any(owner < 0):
            raise IncompleteMap(f"joints {np.flatnonzero(owner < 0).tolist()} are not covered")
        coarse = []
        for g, members in enumerate(self.groups):
            tops = [m for m in members if self.fine_parent[m] < 0 or owner[self.fine_parent[m]] != g]
            if len(tops) != 1:
                raise IncompleteMap(f"super-joint {self.names[g]!r} is not a connected subtree")
            p = self.fine_parent[tops[0]]
            coarse.append(-1 if p < 0 else int(owner[p]))
        owner.setflags(write=False)
        object.__setattr__(self, "owner", owner)
        object.__setattr__(self, "coarse_parent", tuple(coarse))

    @property
    def num_fine(self) -> int:
        return len(self.fine_parent)

    @property
    def num_coarse(self) -> int:
        return len(self.groups)

    def to_json(self, fine_names):
        return [{"name": n, "joints": [fine_names[m] for m in g]} for n, g in zip(self.names, self.groups)]


def identity_map(parent, names) -> PoolingMap:
    return PoolingMap(tuple(names), tuple((i,) for i in range(len(parent))), tuple(parent))


def derive_pooling_maps(skeleton: SkeletonTopology) -> list[PoolingMap]:
    """Two pooling levels for ``skeleton``.

    Explicit maps from the skeleton file win. Otherwise level one collapses each
    joint with its only child along degree-2 chains and level two is the identity.
    """
    if skeleton.pooling is not None:
        if len(skeleton.pooling) != 2:
            raise IncompleteMap("skeleton must ship exactly two pooling levels")
        maps, names, parent = [], list(skeleton.joint_names), skeleton.parent
        for level in skeleton.pooling:
            lookup = {n: i for i, n in enumerate(names)}
            try:
                groups = tuple(tuple(lookup[j] for j in g.joints) for g in level)
            except KeyError as exc:
                raise IncompleteMap(f"pooling map names unknown joint {exc.args[0]!r}") from None
            pm = PoolingMap(tuple(g.name for g in level), groups, tuple(parent))
            maps.append(pm)
            names, parent = list(pm.names), pm.coarse_parent
        return maps
    taken, groups = set(), []
    for j in skeleton.order:
        if j in taken:
            continue
        grp = [j]
        kids = skeleton.children[j]
        if len(kids) == 1 and j != skeleton.root:
            grp.append(kids[0])
        taken.update(grp)
        groups.append(tuple(grp))
    level1 = PoolingMap(tuple(f"g{i}" for i in range(len(groups))), tuple(groups), skeleton.parent)
    return [level1, identity_map(level1.coarse_parent, level1.names)]


def skeletal_pool(features, pmap: PoolingMap, stride: int = 2) -> ad.Tensor:
    """Average fine joints into super-joints and (stride 2) adjacent frame pairs.

    ``features`` is (B, T, J, C) or (T, J, C).
    """
    features = ad.as_tensor(features)
    jax = features.ndim - 2
    if features.shape[jax] != pmap.num_fine:
        raise IncompleteMap(f"map covers {pmap.num_fine} joints, features have {features.shape[jax]}")
    out = ad.group_mean(features, pmap.groups, axis=jax)
    if stride == 2:
        out = ad.time_pool2(out, axis=jax - 1)
    elif stride != 1:
        raise ShapeMismatch("pooling stride must be 1 or 2")
    return out


def skeletal_unpool(features, pmap: PoolingMap, stride: int = 2) -> ad.Tensor:
    """Copy each super-joint to its fine joints and (stride 2) repeat every frame."""
    features = ad.as_tensor(features)
    jax = features.ndim - 2
    if features.shape[jax] != pmap.num_coarse:
        raise IncompleteMap(f"map has {pmap.num_coarse} super-joints, features have {features.shape[jax]}")
    out = ad.take(features, pmap.owner.tolist(), axis=jax)
    if stride == 2:
        out = ad.time_upsample2(out, axis=jax - 1)
    elif stride != 1:
        raise ShapeMismatch("pooling stride must be 1 or 2")
    return out


# ------------------------------------------------------------- convolution


class SkeletalConvLayer:
    """Per-joint, per-neighbour temporal kernels plus one bias per output joint."""

    def __init__(self, adjacency, c_in, c_out, kernel, rng=None, name="conv"):
        if kernel % 2 == 0:
            raise ValidationError("kernel width must be odd")
        self.layout = ad.ConvLayout(adjacency)
        self.c_in, self.c_out, self.kernel, self.name = c_in, c_out, kernel, name
        rng = np.random.default_rng(0) if rng is None else rng
        bound = np.sqrt(1.0 / (c_in * kernel))
        shape = (self.layout.num_edges, c_out, c_in, kernel)
        self.weight = ad.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=f"{name}.weight")
        self.bias = ad.Tensor(np.zeros((self.layout.num_joints, c_out)), requires_grad=True, name=f"{name}.bias")

    @property
    def adjacency(self):
        return self.layout.adjacency

    def block_counts(self):
        return [len(a) for a in self.layout.adjacency]

    def parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}


def skeletal_conv(layer: SkeletalConvLayer, features, adjacency=None) -> ad.Tensor:
    """M_i = (1/|N_i|) sum_{j in N_i} conv_t(features_j, W_j^i) + b_i over (B, T, J, C_in)."""
    if adjacency is not None:
        adjacency = tuple(tuple(int(j) for j in a) for a in adjacency)
        if adjacency != layer.adjacency:
            raise AdjacencyMismatch("adjacency does not match the layer's neighbour blocks")
    features = ad.as_tensor(features)
    squeeze = features.ndim == 3
    if squeeze:
        features = ad.reshape(features, (1,) + features.shape)
    out = ad.skeletal_conv_op(features, layer.weight, layer.bias, layer.layout)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


# ---------------------------------------------------------------- networks


def _levels(skeleton: SkeletonTopology, maps):
    d = skeleton.neighbor_distance
    return [skeleton.adjacency, tree_adjacency(maps[0].coarse_parent, d)]


class _Branch:
    def parameters(self):
        out = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def static_features(self, offsets):
        """Embed per-joint offsets and pool them to level one: (1,1,J,Cs), (1,1,J1,Cs)."""
        s = ad.reshape(ad.Tensor(offsets), (1, 1) + offsets.shape)
        s0 = ad.leaky_relu(skeletal_conv(self.static, s), self.slope)
        s1 = skeletal_pool(s0, self.maps[0], stride=1)
        return s0, s1


def _tile(s, B, T):
    return ad.broadcast_to(s, (B, T) + s.shape[2:])


class Encoder(_Branch):
    def __init__(self, skeleton, maps, cfg: ModelConfig, rng, prefix):
        adj0, adj1 = _levels(skeleton, maps)
        c1, c2 = cfg.channels
        cs, k = cfg.static_channels, cfg.kernel
        self.maps, self.slope, self.root = maps, cfg.negative_slope, skeleton.root
        self.offsets = np.array(skeleton.offset)
        self.static = SkeletalConvLayer(adj0, 3, cs, 1, rng, f"{prefix}.static")
        self.conv1 = SkeletalConvLayer(adj0, ROT_CH + ROOT_CH + cs, c1, k, rng, f"{prefix}.conv1")
        self.conv2 = SkeletalConvLayer(adj1, c1 + cs, c2, k, rng, f"{prefix}.conv2")
        self.layers = (self.static, self.conv1, self.conv2)
        self.rest_anchor = cfg.rest_anchor
        self.rest_height = standing_height(skeleton)

    def __call__(self, rotations, root_translation) -> ad.Tensor:
        """Latent grid, taken relative to the rest pose's grid when ``rest_anchor`` is set.

        The rest pose (identity rotations, root at standing height) then maps to
        zero, so latents of different clips share no constant component.
        """
        z = self.features(rotations, root_translation)
        if not self.rest_anchor:
            return z
        T = z.shape[1] * 4
        rest_rot = np.broadcast_to(Q.IDENTITY, (1, T, len(self.offsets), ROT_CH))
        rest_root = np.zeros((1, T, ROOT_CH))
        rest_root[..., 2] = self.rest_height
        return ad.sub(z, ad.broadcast_to(self.features(rest_rot, rest_root), z.shape))

    def features(self, rotations, root_translation) -> ad.Tensor:
        rotations = ad.as_tensor(rotations)
        B, T, J, _ = rotations.shape
        s0, s1 = self.static_features(self.offsets)
        root = ad.reshape(ad.as_tensor(root_translation), (B, T, 1, ROOT_CH))
        parts = [root]
        if self.root > 0:
            parts.insert(0, ad.Tensor(np.zeros((B, T, self.root, ROOT_CH))))
        if self.root < J - 1:
            parts.append(ad.Tensor(np.zeros((B, T, J - self.root - 1, ROOT_CH))))
        root_ch = ad.concat(parts, axis=2) if len(parts) > 1 else root
        x = ad.concat([rotations, root_ch, _tile(s0, B, T)], axis=-1)
        h = ad.leaky_relu(skeletal_conv(self.conv1, x), self.slope)
        h = skeletal_pool(h, self.maps[0])
        h = ad.concat([h, _tile(s1, B, T // 2)], axis=-1)
        h = skeletal_conv(self.conv2, h)
        return skeletal_pool(h, self.maps[1])


class Decoder(_Branch):
    def __init__(self, skeleton, maps, cfg: ModelConfig, rng, prefix):
        adj0, adj1 = _levels(skeleton, maps)
        c1, c2 = cfg.channels
        cs, k = cfg.static_channels, cfg.kernel
        self.maps, self.slope, self.root = maps, cfg.negative_slope, skeleton.root
        self.offsets = np.array(skeleton.offset)
        self.static = SkeletalConvLayer(adj0, 3, cs, 1, rng, f"{prefix}.static")
        self.conv1 = SkeletalConvLayer(adj1, c2 + cs, c1, k, rng, f"{prefix}.conv1")
        self.conv2 = SkeletalConvLayer(adj0, c1 + cs, ROT_CH + ROOT_CH, k, rng, f"{prefix}.conv2")
        self.layers = (self.static, self.conv1, self.conv2)

    def __call__(self, z):
        """Return raw (B, T, J, 4) rotation rows and (B, T, 3) root translation."""
        z = ad.as_tensor(z)
        B, T4 = z.shape[:2]
        s0, s1 = self.static_features(self.offsets)
        h = skeletal_unpool(z, self.maps[1])
        h = ad.concat([h, _tile(s1, B, 2 * T4)], axis=-1)
        h = ad.leaky_relu(skeletal_conv(self.conv1, h), self.slope)
        h = skeletal_unpool(h, self.maps[0])
        h = ad.concat([h, _tile(s0, B, 4 * T4)], axis=-1)
        out = skeletal_conv(self.conv2, h)
        rot = ad.take(out, [0, 1, 2, 3], axis=-1)
        root = ad.take(ad.take(out, self.root, axis=2), [4, 5, 6], axis=-1)
        return rot, root


@dataclass(frozen=True, eq=False)
class LatentCode:
    """Pooled feature grid (T/4, J', C) produced by one side's encoder."""

    side: str
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


class RetargetModel:
    """Two encoder/decoder pairs whose latent grids share one shape."""

    def __init__(self, skeleton_A, skeleton_B, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.skeletons = {"A": skeleton_A, "B": skeleton_B}
        self.maps = {s: derive_pooling_maps(sk) for s, sk in self.skeletons.items()}
        pa, pb = self.maps["A"][-1], self.maps["B"][-1]
        if pa.num_coarse != pb.num_coarse:
            raise TopologyMismatch(
                f"prototype counts differ: {skeleton_A.name} has {pa.num_coarse}, {skeleton_B.name} has {pb.num_coarse}"
            )
        if skeleton_A.pooling is not None and skeleton_B.pooling is not None and pa.names != pb.names:
            raise TopologyMismatch(f"prototype names differ: {pa.names} vs {pb.names}")
        if self.maps["A"][-1].coarse_parent != self.maps["B"][-1].coarse_parent:
            raise TopologyMismatch("prototype trees differ between the two skeletons")
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.encoders, self.decoders = {}, {}
        for s in SIDES:
            self.encoders[s] = Encoder(self.skeletons[s], self.maps[s], self.config, rng, f"encoder_{s}")
            self.decoders[s] = Decoder(self.skeletons[s], self.maps[s], self.config, rng, f"decoder_{s}")

    @property
    def window(self) -> int:
        return self.config.window

    @property
    def latent_shape(self):
        c = self.config
        return (c.window // 4, self.maps["A"][-1].num_coarse, c.channels[1])

    def parameters(self, *groups) -> dict:
        """Ordered ``name -> Tensor``; ``groups`` filters by prefix such as ``decoder_B``."""
        out = {}
        for s in SIDES:
            out.update(self.encoders[s].parameters())
            out.update(self.decoders[s].parameters())
        if groups:
            out = {k: v for k, v in out.items() if k.split(".")[0] in groups}
        return out

    def state_dict(self) -> dict:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ValidationError(f"checkpoint lacks tensors {sorted(missing)[:3]}...")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeMismatch(f"tensor {k}: checkpoint {arr.shape} vs model {p.shape}")
            p.value = arr.copy()

    def copy(self) -> RetargetModel:
        other = RetargetModel(self.skeletons["A"], self.skeletons["B"], self.config, self.seed)
        other.load_state_dict(self.state_dict())
        return other

    def set_trainable(self, *groups):
        """Enable gradients only for the named groups (all groups when empty)."""
        for name, p in self.parameters().items():
            p.requires_grad = not groups or name.split(".")[0] in groups


# ------------------------------------------------------------ forward passes


def encode_tensor(model: RetargetModel, side: str, rotations, root_translation) -> ad.Tensor:
    return model.encoders[side](rotations, root_translation)


def decode_tensor(model: RetargetModel, side: str, z):
    return model.decoders[side](z)


def _check_clip(model, side, clip: MotionClip):
    clip.check_skeleton(model.skeletons[side])
    if clip.num_frames != model.window:
        raise WindowLengthMismatch(f"clip has {clip.num_frames} frames, model window is {model.window}")


def stack_clips(clips):
    rot = np.stack([c.rotations for c in clips])
    root = np.stack([c.root_translation for c in clips])
    return rot, root


def raw_to_clip(skeleton_name: str, fps: float, rot_raw, root) -> MotionClip:
    """Project raw decoder rows to unit canonical quaternions (degenerate rows -> identity)."""
    rot_raw = np.asarray(rot_raw, dtype=np.float64)
    root = np.where(np.isfinite(root), root, 0.0)
    n = np.linalg.norm(rot_raw, axis=-1, keepdims=True)
    good = np.isfinite(n) & (n > Q.ZERO_NORM)
    unit = np.where(good, rot_raw / np.where(good, n, 1.0), Q.IDENTITY)
    return MotionClip(skeleton_name, fps, root, Q.canonicalize(unit))


def encode(model: RetargetModel, side: str, clip: MotionClip) -> LatentCode:
    _check_clip(model, side, clip)
    z = encode_tensor(model, side, clip.rotations[None], clip.root_translation[None])
    return LatentCode(side, z.value[0])


def decode(model: RetargetModel, side: str, z) -> MotionClip:
    vals = z.values if isinstance(z, LatentCode) else np.asarray(z, dtype=np.float64)
    if vals.shape != model.latent_shape:
        raise ShapeMismatch(f"latent shape {vals.shape} does not match model {model.latent_shape}")
    rot, root = decode_tensor(model, side, vals[None])
    return raw_to_clip(model.skeletons[side].name, model.config.fps, rot.value[0], root.value[0])


def _retarget_arrays(model, rot, root, fps):
    z = encode_tensor(model, "A", rot, root)
    out_rot, out_root = decode_tensor(model, "B", z)
    name = model.skeletons["B"].name
    return [raw_to_clip(name, fps[i], out_rot.value[i], out_root.value[i]) for i in range(rot.shape[0])]


def retarget(model: RetargetModel, clip_A: MotionClip) -> MotionClip:
    """decode_B(encode_A(clip)) for one window-length clip on skeleton A."""
    _check_clip(model, "A", clip_A)
    z = encode(model, "A", clip_A)
    out = decode(model, "B", z)
    return MotionClip(out.skeleton, clip_A.fps, out.root_translation, out.rotations)


class BatchError(IKMRError):
    """One or more clips in a batch failed; ``errors`` holds ``(index, exception)`` pairs."""

    def __init__(self, errors):
        self.errors = errors
        detail = "; ".join(f"clip {i}: {e}" for i, e in errors[:5])
        super().__init__(f"{len(errors)} clip(s) failed: {detail}")


def retarget_batch(model: RetargetModel, clips, workers: int = 1) -> list[MotionClip]:
    """Retarget many clips, splitting them into at most ``workers`` concurrent chunks.

    Results match :func:`retarget` bit for bit: the convolution kernels treat
    every sample independently of the batch it rides in.
    """
    clips = list(clips)
    errors = []
    for i, c in enumerate(clips):
        try:
            _check_clip(model, "A", c)
        except IKMRError as exc:
            errors.append((i, exc))
    if errors:
        raise BatchError(errors)
    if not clips:
        return []
    workers = max(1, min(int(workers), len(clips)))
    bounds = np.linspace(0, len(clips), workers + 1).astype(int)
    chunks = [clips[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def run(chunk):
        rot, root = stack_clips(chunk)
        return _retarget_arrays(model, rot, root, [c.fps for c in chunk])

    if len(chunks) == 1:
        return run(chunks[0])
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(run, chunks))
    return [c for part in parts for c in part]


def retarget_long(model: RetargetModel, clip: MotionClip, workers: int = 1) -> MotionClip:
    """Retarget a clip of any length via overlapping windows blended at the seams."""
    clip.check_skeleton(model.skeletons["A"])
    windows, starts = split_windows(clip, model.window)
    outs = retarget_batch(model, windows, workers)
    return blend_windows(outs, starts, clip.num_frames)


# ---------------------------------------------------------------- model files


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def model_sidecar(model: RetargetModel, meta=None) -> dict:
    c = model.config
    d = {
        "format_version": FORMAT_VERSION,
        "window": c.window,
        "channels": list(c.channels),
        "kernel": c.kernel,
        "static_channels": c.static_channels,
        "negative_slope": c.negative_slope,
        "fps": c.fps,
        "rest_anchor": c.rest_anchor,
        "seed": model.seed,
        "skeleton_A": model.skeletons["A"].name,
        "skeleton_B": model.skeletons["B"].name,
        "skeletons": {s: skeleton_to_dict(model.skeletons[s]) for s in SIDES},
        "pooling_maps": {s: _maps_json(model.skeletons[s], model.maps[s]) for s in SIDES},
    }
    if meta:
        d["meta"] = meta
    return d


def save_model(model: RetargetModel, path, extra=None, meta=None):
    """Write ``path`` (checkpoint container) and its ``.json`` sidecar."""
    tensors = model.state_dict()
    if extra:
        tensors.update(extra)
    checkpoint.save(tensors, path)
    sidecar_path(path).write_text(json.dumps(model_sidecar(model, meta), indent=2) + "\n", encoding="utf-8")


def load_model(path):
    """Return ``(model, sidecar dict, extra tensors)`` from a checkpoint and its sidecar."""
    side = json.loads(sidecar_path(path).read_text(encoding="utf-8"))
    if side.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported model sidecar format_version {side.get('format_version')!r}")
    try:
        sks = {}
        for s in SIDES:
            sk = skeleton_from_dict(side["skeletons"][s])
            levels = side["pooling_maps"][s]
            if _maps_json(sk, derive_pooling_maps(sk)) != levels:
                sk = _with_pooling(sk, levels)
            if sk.name != side[f"skeleton_{s}"]:
                raise SkeletonMismatch(f"sidecar skeleton_{s} does not match embedded skeleton")
            sks[s] = sk
        cfg = ModelConfig(
            window=side["window"],
            channels=tuple(side["channels"]),
            kernel=side["kernel"],
            static_channels=side["static_channels"],
            negative_slope=side["negative_slope"],
            fps=side["fps"],
            rest_anchor=side.get("rest_anchor", True),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model sidecar: {exc!r}") from exc
    model = RetargetModel(sks["A"], sks["B"], cfg, side.get("seed", 0))
    tensors = checkpoint.load(path)
    model.load_state_dict(tensors)
    names = set(model.parameters())
    extra = {k: v for k, v in tensors.items() if k not in names}
    return model, side, extra


def _maps_json(sk: SkeletonTopology, maps):
    out, names = [], sk.joint_names
    for m in maps:
        out.append(m.to_json(names))
        names = m.names
    return out


def _with_pooling(sk: SkeletonTopology, levels) -> SkeletonTopology:
    d = skeleton_to_dict(sk)
    d["pooling"] = [[{"name": g["name"], "joints": list(g["joints"])} for g in lvl] for lvl in levels]
    return skeleton_from_dict(d)
