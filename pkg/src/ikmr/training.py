"""Losses, optimizers, the pretraining / fine-tuning loops and synthetic pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import quat as Q
from .errors import EmptyDataset, LengthMismatch, ShapeMismatch, TopologyMismatch, ValidationError
from .kinematics import fk_arrays, fk_differentiable, standing_height
from .nets import RetargetModel, decode_tensor, encode_tensor, stack_clips
from .skeleton import (
    FORMAT_VERSION,
    MotionClip,
    SkeletonTopology,
    dumps,
    load_json,
    motion_from_dict,
    motion_to_dict,
    write_text,
)

PROVENANCES = ("synthetic", "filtered")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 3000
    batch_size: int = 8
    lambda_align: float = 1.0
    lambda_consis: float = 0.1
    lambda_ee: float = 1.0
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_align, self.lambda_consis, self.lambda_ee) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")


# ------------------------------------------------------------------- dataset


@dataclass
class PairedDataset:
    skeleton_A: str
    skeleton_B: str
    pairs: list = field(default_factory=list)
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"provenance must be one of {PROVENANCES}")
        for i, (a, b) in enumerate(self.pairs):
            if a.skeleton != self.skeleton_A or b.skeleton != self.skeleton_B:
                raise ValidationError(f"pair {i} is on the wrong skeletons")
            if a.num_frames != b.num_frames:
                raise ValidationError(f"pair {i} has mismatched lengths")

    def __len__(self):
        return len(self.pairs)

    def subset(self, idx) -> PairedDataset:
        return PairedDataset(self.skeleton_A, self.skeleton_B, [self.pairs[i] for i in idx], self.provenance)

    def clips(self, side: str):
        k = 0 if side == "A" else 1
        return [p[k] for p in self.pairs]


def dataset_to_dict(ds: PairedDataset) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "provenance": ds.provenance,
        "skeleton_A": ds.skeleton_A,
        "skeleton_B": ds.skeleton_B,
        "pairs": [{"a": motion_to_dict(a), "b": motion_to_dict(b)} for a, b in ds.pairs],
    }


def dataset_from_dict(d: dict) -> PairedDataset:
    if not isinstance(d, dict) or d.get("format_version") != FORMAT_VERSION:
        raise ValidationError("unsupported dataset format_version")
    try:
        pairs = [(motion_from_dict(p["a"]), motion_from_dict(p["b"])) for p in d["pairs"]]
        return PairedDataset(d["skeleton_A"], d["skeleton_B"], pairs, d.get("provenance", "synthetic"))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed dataset: {exc!r}") from exc


def save_dataset(ds: PairedDataset, path):
    write_text(path, dumps(dataset_to_dict(ds)))


def load_dataset(path) -> PairedDataset:
    return dataset_from_dict(load_json(path))


@dataclass
class Batch:
    """Stacked arrays for a list of (clip_A, clip_B) pairs."""

    rot_A: np.ndarray
    root_A: np.ndarray
    rot_B: np.ndarray
    root_B: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> Batch:
        pairs = list(pairs)
        if not pairs:
            raise EmptyDataset("empty batch")
        ra, ta = stack_clips([p[0] for p in pairs])
        rb, tb = stack_clips([p[1] for p in pairs])
        return cls(ra, ta, rb, tb)

    def side(self, s):
        return (self.rot_A, self.root_A) if s == "A" else (self.rot_B, self.root_B)


def _as_batch(pair) -> Batch:
    if isinstance(pair, Batch):
        return pair
    if isinstance(pair, tuple) and len(pair) == 2 and isinstance(pair[0], MotionClip):
        return Batch.from_pairs([pair])
    return Batch.from_pairs(pair)


# -------------------------------------------------------------------- losses


def loss_align(z_A, z_B) -> ad.Tensor:
    """Mean squared difference between the two sides' latent grids."""
    z_A = z_A.values if hasattr(z_A, "values") else z_A
    z_B = z_B.values if hasattr(z_B, "values") else z_B
    z_A, z_B = ad.as_tensor(z_A), ad.as_tensor(z_B)
    if z_A.shape != z_B.shape:
        raise ShapeMismatch(f"latent shapes {z_A.shape} and {z_B.shape} differ")
    return ad.mse(z_A, z_B)


def _motion_mse(decoded, rot, root) -> ad.Tensor:
    drot, droot = decoded
    return ad.add(ad.mse(drot, ad.Tensor(rot)), ad.mse(droot, ad.Tensor(root)))


def _other(s):
    return "B" if s == "A" else "A"


def _recon_terms(model, b: Batch, z, sides):
    """Self- and cross-reconstruction error onto each requested side."""
    total, decoded = None, {}
    for s in sides:
        rot, root = b.side(s)
        dec_self = decode_tensor(model, s, z[s])
        dec_cross = decode_tensor(model, s, z[_other(s)])
        decoded[s] = dec_self
        term = ad.add(_motion_mse(dec_self, rot, root), _motion_mse(dec_cross, rot, root))
        total = term if total is None else ad.add(total, term)
    return total, decoded


def _encode_both(model, b: Batch):
    return {s: encode_tensor(model, s, *b.side(s)) for s in ("A", "B")}


def loss_recon(model: RetargetModel, pair, sides=("A", "B")) -> ad.Tensor:
    """Self plus cross reconstruction per side, on raw decoder rows vs canonical targets."""
    b = _as_batch(pair)
    total, _ = _recon_terms(model, b, _encode_both(model, b), sides)
    return total


def _consistency(model, z, decoded, sides):
    total = None
    for s in sides:
        drot, droot = decoded[s]
        z_again = encode_tensor(model, s, ad.normalize_last(drot), droot)
        term = ad.mse(z_again, z[s])
        total = term if total is None else ad.add(total, term)
    return total


def loss_consistency(model: RetargetModel, pair, sides=("A", "B")) -> ad.Tensor:
    """Latent drift after one encode-decode-encode round trip on each side."""
    b = _as_batch(pair)
    z = {s: encode_tensor(model, s, *b.side(s)) for s in sides}
    decoded = {s: decode_tensor(model, s, z[s]) for s in sides}
    return _consistency(model, z, decoded, sides)


def pretrain_terms(model: RetargetModel, pair, config: TrainConfig):
    """Return ``(total, recon, align, consis)`` sharing one set of forward passes."""
    b = _as_batch(pair)
    z = _encode_both(model, b)
    recon, decoded = _recon_terms(model, b, z, ("A", "B"))
    align = ad.mse(z["A"], z["B"])
    consis = _consistency(model, z, decoded, ("A", "B"))
    total = ad.add(recon, ad.add(ad.scale(align, config.lambda_align), ad.scale(consis, config.lambda_consis)))
    return total, recon, align, consis


def loss_pretrain(model: RetargetModel, pair, config: TrainConfig) -> ad.Tensor:
    return pretrain_terms(model, pair, config)[0]


def loss_ee(model: RetargetModel, clip_A, feasible_B) -> ad.Tensor:
    """MSE between end-effector positions of the retargeted clip and the feasible target."""
    if isinstance(clip_A, MotionClip):
        clip_A, feasible_B = [clip_A], [feasible_B]
    if len(clip_A) != len(feasible_B):
        raise LengthMismatch("clip lists differ in length")
    skB = model.skeletons["B"]
    for c in feasible_B:
        c.check_skeleton(skB)
    rot, root = stack_clips(clip_A)
    frot, froot = stack_clips(feasible_B)
    return _ee_term(model, encode_tensor(model, "A", rot, root), frot, froot)


def _ee_term(model, z_A, frot, froot):
    skB = model.skeletons["B"]
    ee = list(skB.end_effectors)
    drot, droot = decode_tensor(model, "B", z_A)
    pred = ad.take(fk_differentiable(skB, drot, droot), ee, axis=-2)
    target = fk_arrays(skB, frot, froot)[..., ee, :]
    return ad.mse(pred, ad.Tensor(target))


def finetune_terms(model: RetargetModel, pair, config: TrainConfig):
    """Return ``(total, recon_B, ee)`` for a batch of (human, feasible) pairs."""
    b = _as_batch(pair)
    z = _encode_both(model, b)
    recon, _ = _recon_terms(model, b, z, ("B",))
    ee = _ee_term(model, z["A"], b.rot_B, b.root_B)
    return ad.add(recon, ad.scale(ee, config.lambda_ee)), recon, ee


# ---------------------------------------------------------------- optimizers


class Optimizer:
    """Adam-style adaptive moments or plain SGD over named parameter tensors."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params: dict):
        c = self.config
        self.t += 1
        if c.learning_rate == 0.0:
            return
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if c.optimizer == "sgd":
                p.value = p.value - c.learning_rate * g
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - c.beta1) * g if m is None else c.beta1 * m + (1 - c.beta1) * g
            v = (1 - c.beta2) * g * g if v is None else c.beta2 * v + (1 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - c.beta1**self.t)
            vhat = v / (1 - c.beta2**self.t)
            p.value = p.value - c.learning_rate * mhat / (np.sqrt(vhat) + c.eps)

    def state(self, prefix="optim") -> dict:
        out = {f"{prefix}/step": np.array([float(self.t)])}
        for k, v in self.m.items():
            out[f"{prefix}/m/{k}"] = v
        for k, v in self.v.items():
            out[f"{prefix}/v/{k}"] = v
        return out

    def load_state(self, tensors: dict, prefix="optim"):
        if f"{prefix}/step" in tensors:
            self.t = int(tensors[f"{prefix}/step"][0])
        for k, v in tensors.items():
            if k.startswith(f"{prefix}/m/"):
                self.m[k[len(prefix) + 3 :]] = v.copy()
            elif k.startswith(f"{prefix}/v/"):
                self.v[k[len(prefix) + 3 :]] = v.copy()


def batch_indices(n: int, batch_size: int, step: int, seed: int):
    """Sample indices for ``step``: consecutive slices of a seeded permutation per epoch."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, pos = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        take = min(batch_size - len(out), n - pos)
        out.extend(perm[pos : pos + take].tolist())
    return out


class JsonlLog:
    """Appends one JSON record per step; ``None`` path disables logging."""

    def __init__(self, path=None, append=False):
        self.fh = None
        if path is not None:
            self.fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record):
        if self.fh is not None:
            self.fh.write(json.dumps(record) + "\n")

    def close(self):
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def dataset_loss(model, dataset: PairedDataset, config: TrainConfig, chunk=32) -> float:
    """Pretraining objective averaged over the whole dataset (no gradients kept)."""
    tot, n = 0.0, len(dataset)
    for s in range(0, n, chunk):
        part = dataset.pairs[s : s + chunk]
        tot += float(loss_pretrain(model, part, config).value) * len(part)
    return tot / n


def pretrain(model: RetargetModel, dataset: PairedDataset, config: TrainConfig, log_path=None,
             start_step: int = 0, optimizer: Optimizer | None = None, progress=None):
    """Minimise recon + align + consistency over seeded mini-batches.

    Mutates and returns ``model`` with the per-step history. Resuming with the
    saved optimizer and ``start_step`` replays the same batch sequence.
    """
    if len(dataset) == 0:
        raise EmptyDataset("pretraining needs at least one pair")
    opt = optimizer or Optimizer(config)
    model.set_trainable()
    params = model.parameters()
    log = JsonlLog(log_path, append=start_step > 0)
    history = []
    try:
        for step in range(start_step, start_step + config.steps):
            idx = batch_indices(len(dataset), config.batch_size, step, config.seed)
            ad.zero_grad(params.values())
            total, recon, align, consis = pretrain_terms(model, [dataset.pairs[i] for i in idx], config)
            ad.backward(total)
            opt.step(params)
            rec = {
                "step": step,
                "loss_total": float(total.value),
                "loss_recon": float(recon.value),
                "loss_align": float(align.value),
                "loss_consis": float(consis.value),
            }
            history.append(rec)
            log.write(rec)
            if progress is not None:
                progress(rec)
    finally:
        log.close()
    ad.zero_grad(params.values())
    return model, history


def finetune(model: RetargetModel, human_clips, feasible_clips, config: TrainConfig, log_path=None, progress=None):
    """Update decoder_B only on (human, feasible) pairs: B-side recon + weighted EE loss."""
    human_clips, feasible_clips = list(human_clips), list(feasible_clips)
    if len(human_clips) != len(feasible_clips):
        raise LengthMismatch(f"{len(human_clips)} human clips vs {len(feasible_clips)} feasible clips")
    if not human_clips:
        raise EmptyDataset("fine-tuning needs at least one pair")
    for c in feasible_clips:
        c.check_skeleton(model.skeletons["B"])
    for c in human_clips:
        c.check_skeleton(model.skeletons["A"])
    pairs = list(zip(human_clips, feasible_clips))
    opt = Optimizer(config)
    model.set_trainable("decoder_B")
    params = model.parameters("decoder_B")
    log = JsonlLog(log_path)
    history = []
    try:
        for step in range(config.steps):
            idx = batch_indices(len(pairs), config.batch_size, step, config.seed)
            ad.zero_grad(params.values())
            total, recon, ee = finetune_terms(model, [pairs[i] for i in idx], config)
            ad.backward(total)
            opt.step(params)
            rec = {"step": step, "loss_recon_B": float(recon.value), "loss_ee": float(ee.value)}
            history.append(rec)
            log.write(rec)
            if progress is not None:
                progress(rec)
    finally:
        log.close()
        model.set_trainable()
    ad.zero_grad(model.parameters().values())
    return model, history


# --------------------------------------------------------- synthetic pairs


def load_correspondence(path) -> dict:
    d = load_json(path)
    if d.get("format_version") != FORMAT_VERSION:
        raise ValidationError("unsupported correspondence format_version")
    return d


def default_correspondence(skeleton_A: SkeletonTopology, skeleton_B: SkeletonTopology) -> dict:
    """Shipped table for known pairs, else same-name joints with unit gain."""
    from .resources import config_path

    p = config_path(f"{skeleton_A.name}_to_{skeleton_B.name}.json")
    if p.exists():
        return load_correspondence(p)
    table = {n: {"source": n, "gain": 1.0} for n in skeleton_B.joint_names if n in skeleton_A.joint_names}
    return {"format_version": FORMAT_VERSION, "skeleton_A": skeleton_A.name, "skeleton_B": skeleton_B.name,
            "correspondence": table}


def _resolve_table(skeleton_A, skeleton_B, correspondence):
    from .nets import derive_pooling_maps

    try:
        pa, pb = derive_pooling_maps(skeleton_A)[-1], derive_pooling_maps(skeleton_B)[-1]
    except ValidationError as exc:
        raise TopologyMismatch(str(exc)) from exc
    if pa.num_coarse != pb.num_coarse or pa.coarse_parent != pb.coarse_parent:
        raise TopologyMismatch(f"{skeleton_A.name} and {skeleton_B.name} are not homeomorphic")
    corr = correspondence or default_correspondence(skeleton_A, skeleton_B)
    table = corr["correspondence"] if "correspondence" in corr else corr
    src = np.full(skeleton_B.num_joints, -1)
    gain = np.zeros(skeleton_B.num_joints)
    for bname, entry in table.items():
        if bname not in skeleton_B.joint_names or entry["source"] not in skeleton_A.joint_names:
            raise TopologyMismatch(f"correspondence entry {bname!r} -> {entry['source']!r} names an unknown joint")
        j = skeleton_B.joint_names.index(bname)
        src[j] = skeleton_A.joint_names.index(entry["source"])
        gain[j] = float(entry["gain"])
    return src, gain


def map_angles(angles_A, src, gain):
    """Joint angles on B: copy through the correspondence table, scaled per joint."""
    out = np.zeros(angles_A.shape[:-1] + (len(src),))
    has = src >= 0
    out[..., has] = angles_A[..., src[has]] * gain[has]
    return out


def synthetic_angles(rng, T, J, fps, root_index, amplitude=1.0):
    """Band-limited per-joint angles: 1-3 sinusoids whose amplitudes sum to <= pi/2."""
    t = np.arange(T) / fps
    out = np.zeros((T, J))
    for j in range(J):
        n = int(rng.integers(1, 4))
        freq = rng.uniform(0.2, 1.0, n)
        phase = rng.uniform(0.0, 2.0 * np.pi, n)
        share = rng.dirichlet(np.ones(n))
        total = rng.uniform(0.2, 1.0) * (np.pi / 2) * amplitude * (0.5 if j == root_index else 1.0)
        out[:, j] = np.sin(2 * np.pi * freq[None, :] * t[:, None] + phase[None, :]) @ (share * total)
    return out


def synthetic_root(rng, T, fps, height, amplitude=1.0):
    t = np.arange(T) / fps
    amp = np.array([0.1, 0.1, 0.03]) * amplitude * rng.uniform(0.3, 1.0, 3)
    freq = rng.uniform(0.2, 1.0, 3)
    phase = rng.uniform(0.0, 2.0 * np.pi, 3)
    root = amp[None, :] * np.sin(2 * np.pi * freq[None, :] * t[:, None] + phase[None, :])
    root[:, 2] += height
    return root


def angles_to_rotations(sk: SkeletonTopology, angles):
    return Q.canonicalize(Q.from_axis_angle(np.asarray(sk.axes)[None], angles))


def generate_synthetic_pairs(skeleton_A: SkeletonTopology, skeleton_B: SkeletonTopology, count: int, seed: int,
                             correspondence=None, window: int = 64, fps: float = 30.0,
                             amplitude: float = 1.0) -> PairedDataset:
    """Paired windows with an exact analytic retarget from A to B.

    Clip A drives each joint about its fixed axis with 1-3 sinusoids; clip B copies
    those angles through the correspondence table with per-joint gains and scales
    the root path by the ratio of standing heights.
    """
    src, gain = _resolve_table(skeleton_A, skeleton_B, correspondence)
    hA, hB = standing_height(skeleton_A), standing_height(skeleton_B)
    ratio = hB / hA if hA > 0 else 1.0
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        ang = synthetic_angles(rng, window, skeleton_A.num_joints, fps, skeleton_A.root, amplitude)
        root = synthetic_root(rng, window, fps, hA, amplitude)
        clip_A = MotionClip(skeleton_A.name, fps, root, angles_to_rotations(skeleton_A, ang))
        clip_B = MotionClip(skeleton_B.name, fps, root * ratio,
                            angles_to_rotations(skeleton_B, map_angles(ang, src, gain)))
        pairs.append((clip_A, clip_B))
    return PairedDataset(skeleton_A.name, skeleton_B.name, pairs, "synthetic")


def analytic_retarget(clip_A: MotionClip, skeleton_A, skeleton_B, correspondence=None) -> MotionClip:
    """Ground-truth B clip for a synthetic A clip, recomputed from its joint angles."""
    src, gain = _resolve_table(skeleton_A, skeleton_B, correspondence)
    ang = Q.twist_angle(clip_A.rotations, np.asarray(skeleton_A.axes))
    hA, hB = standing_height(skeleton_A), standing_height(skeleton_B)
    ratio = hB / hA if hA > 0 else 1.0
    return MotionClip(skeleton_B.name, clip_A.fps, clip_A.root_translation * ratio,
                      angles_to_rotations(skeleton_B, map_angles(ang, src, gain)))


def write_history(history, path):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in history), encoding="utf-8")


def feasible_targets(model: RetargetModel, clips_A, limits, workers: int = 1):
    """Dynamics-filtered versions of the model's own retargets, used as fine-tuning targets."""
    from .dynamics import dynamics_filter
    from .nets import retarget_batch

    skB = model.skeletons["B"]
    return [dynamics_filter(skB, c, limits) for c in retarget_batch(model, clips_A, workers)]
