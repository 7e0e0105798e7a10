"""Dense float64 tensors with tape-based reverse-mode differentiation.

Each differentiable op records its parents and a backward closure on the
result. :func:`backward` collects the records reachable from a scalar loss,
orders them by creation (the tape), and replays them in reverse exactly once.
Leaf tensors with ``requires_grad=True`` accumulate into ``.grad`` until
:func:`zero_grad` is called; intermediate adjoints are discarded.

Broadcasting is limited to a scalar (shape ``()``) operand; anything else
needs an explicit :func:`broadcast_to`.
"""

from __future__ import annotations

import itertools

import numpy as np

from .. import _kernels
from ..errors import InvalidKernel, NotScalar, ShapeMismatch

_counter = itertools.count()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.array(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def numpy(self):
        return self.value

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(value, requires_grad=False, name=None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._id = next(_counter)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Backward records reachable from ``root``, in creation order."""

    def __init__(self, root: Tensor):
        seen, stack, records = set(), [root], []
        while stack:
            node = stack.pop()
            if id(node) in seen or node._backward is None:
                continue
            seen.add(id(node))
            records.append(node)
            stack.extend(node._parents)
        records.sort(key=lambda n: n._id)
        self.records = records

    def __len__(self):
        return len(self.records)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.shape != ():
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        _accumulate(loss, np.ones(()))
        return
    tape = Tape(loss)
    adj = {id(loss): np.ones(())}
    for node in reversed(tape.records):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            else:
                key = id(parent)
                prev = adj.get(key)
                adj[key] = pg if prev is None else prev + pg


def _accumulate(leaf: Tensor, g):
    g = np.asarray(g, dtype=np.float64)
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64, copy=True).reshape(leaf.shape)
    else:
        leaf.grad += g


def zero_grad(params):
    for p in params:
        p.grad = None


# ------------------------------------------------------------------ elementwise


def _pair(a, b, op):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast allowed)")
    return a, b


def _unbroadcast(g, shape):
    return np.sum(g) if shape == () and np.ndim(g) else g


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    av, bv = a.value, b.value
    sa, sb = a.shape, b.shape
    return _result(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.value * c, (x,), lambda g: (g * c,))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _result(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, max(x.value.size, 1)
    return _result(np.mean(x.value), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse: shapes {a.shape} and {b.shape} differ")
    d = a.value - b.value
    n = max(d.size, 1)

    def bw(g):
        gd = d * (2.0 * g / n)
        return gd, -gd

    return _result(np.mean(d * d), (a, b), bw)


def leaky_relu(x, slope=0.2) -> Tensor:
    x = as_tensor(x)
    mask = np.where(x.value > 0.0, 1.0, slope)
    return _result(x.value * mask, (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------- shaping


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    """Explicit broadcast; size-1 or missing leading axes are expanded."""
    x = as_tensor(x)
    old = x.shape
    try:
        v = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {old} to {shape}") from exc
    lead = len(shape) - len(old)

    def bw(g):
        g = np.sum(g, axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(old) if n == 1 and g.shape[i] != 1)
        return (np.sum(g, axis=axes, keepdims=True) if axes else g,)

    return _result(np.array(v), (x,), bw)


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {ref} and {x.shape}")
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _result(np.concatenate([x.value for x in xs], axis=ax), xs, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    for x in xs[1:]:
        if x.shape != xs[0].shape:
            raise ShapeMismatch(f"stack: shapes {xs[0].shape} and {x.shape} differ")
    ax = axis % (xs[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return _result(np.stack([x.value for x in xs], axis=ax), xs, bw)


def take(x, index, axis=-1) -> Tensor:
    """``np.take`` along one axis; an int index drops that axis."""
    x = as_tensor(x)
    shape = x.shape
    ax = axis % len(shape)

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        if np.isscalar(index):
            sl[ax] = index
            full[tuple(sl)] = g
        else:
            idx = np.asarray(index)
            moved = np.moveaxis(full, ax, 0)
            np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _result(np.take(x.value, index, axis=ax), (x,), bw)


# ------------------------------------------------------------------ quaternion


def normalize_last(x) -> Tensor:
    """Divide each row along the last axis by its Euclidean norm."""
    x = as_tensor(x)
    n = np.linalg.norm(x.value, axis=-1, keepdims=True)
    y = x.value / n

    def bw(g):
        return ((g - y * np.sum(y * g, axis=-1, keepdims=True)) / n,)

    return _result(y, (x,), bw)


def hemisphere_sign(x) -> Tensor:
    """Multiply each quaternion row by the constant sign making it canonical."""
    from ..quat import canonicalize

    x = as_tensor(x)
    v = x.value
    sign = np.where(np.all(canonicalize(v) == v, axis=-1, keepdims=True), 1.0, -1.0)
    return _result(v * sign, (x,), lambda g: (g * sign,))


_CONJ = np.array([1.0, -1.0, -1.0, -1.0])


def qconj(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.value * _CONJ, (x,), lambda g: (g * _CONJ,))


def qmul(a, b) -> Tensor:
    """Hamilton product of quaternion rows (no renormalization)."""
    from ..quat import hamilton

    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1] != 4:
        raise ShapeMismatch(f"qmul: shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        return hamilton(g, bv * _CONJ), hamilton(av * _CONJ, g)

    return _result(hamilton(av, bv), (a, b), bw)


def qrotate(q, v) -> Tensor:
    """Rotate vectors ``v`` (..., 3) by quaternions ``q`` (..., 4) as ``q (0, v) q*``."""
    q, v = as_tensor(q), as_tensor(v)
    pure = concat([Tensor(np.zeros(v.shape[:-1] + (1,))), v], axis=-1)
    r = qmul(qmul(q, pure), qconj(q))
    return take(r, [1, 2, 3], axis=-1)


# ---------------------------------------------------------------- convolution


class ConvLayout:
    """Neighbour lists flattened to CSR form for the convolution kernels."""

    __slots__ = ("adjacency", "nbr_ptr", "nbr_idx", "inv_deg")

    def __init__(self, adjacency):
        self.adjacency = tuple(tuple(int(j) for j in a) for a in adjacency)
        self.nbr_ptr = np.array([0] + list(np.cumsum([len(a) for a in self.adjacency])), dtype=np.int64)
        self.nbr_idx = np.array([j for a in self.adjacency for j in a], dtype=np.int64)
        self.inv_deg = np.array([1.0 / len(a) for a in self.adjacency])

    @property
    def num_joints(self):
        return len(self.adjacency)

    @property
    def num_edges(self):
        return len(self.nbr_idx)


SINGLE = ConvLayout([[0]])


def _skconv(x, w, b, layout: ConvLayout, stride: int, padding: int) -> Tensor:
    E, Co, Ci, K = w.shape
    xv = np.ascontiguousarray(x.value)
    wt = np.ascontiguousarray(w.value.transpose(0, 3, 2, 1)).reshape(E, K * Ci, Co)
    kern = _kernels.get()
    out = kern.forward(xv, wt, layout.nbr_ptr, layout.nbr_idx, layout.inv_deg, K, stride, padding)
    if b is not None:
        out = out + b.value
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx, gwt = kern.backward(
            g, xv, wt, layout.nbr_ptr, layout.nbr_idx, layout.inv_deg, K, stride, padding,
            x.requires_grad, w.requires_grad,
        )
        gw = None if gwt is None else gwt.reshape(E, K, Ci, Co).transpose(0, 3, 2, 1)
        if b is None:
            return gx, gw
        gb = np.sum(g, axis=(0, 1)) if b.requires_grad else None
        return gx, gw, gb

    return _result(out, parents, bw)


def temporal_conv1d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over time of ``x`` (T, C_in) or (B, T, C_in).

    ``weight`` is (C_out, C_in, K) with K odd; output length is
    ``(T + 2*padding - K) // stride + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3:
        raise ShapeMismatch(f"weight must be C_out x C_in x K, got {weight.shape}")
    Co, Ci, K = weight.shape
    if K % 2 == 0:
        raise InvalidKernel(f"kernel width must be odd, got {K}")
    if stride < 1 or padding < 0:
        raise ShapeMismatch("stride must be >= 1 and padding >= 0")
    batched = x.ndim == 3
    if x.ndim not in (2, 3) or x.shape[-1] != Ci:
        raise ShapeMismatch(f"input {x.shape} does not match weight C_in={Ci}")
    T = x.shape[-2]
    if T < 1 or (T + 2 * padding - K) // stride + 1 < 1:
        raise ShapeMismatch(f"input length {T} too short for kernel {K} with padding {padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (Co,):
            raise ShapeMismatch(f"bias must have shape ({Co},), got {bias.shape}")
        bias = reshape(bias, (1, Co))
    x4 = reshape(x, (x.shape[0] if batched else 1, T, 1, Ci))
    w4 = reshape(weight, (1, Co, Ci, K))
    out = _skconv(x4, w4, bias, SINGLE, stride, padding)
    Tout = out.shape[1]
    return reshape(out, (x.shape[0], Tout, Co) if batched else (Tout, Co))


def skeletal_conv_op(x, weight, bias, layout: ConvLayout, padding=None) -> Tensor:
    """Neighbour-averaged temporal convolution over a joint graph.

    ``x`` is (B, T, J, C_in); ``weight`` (E, C_out, C_in, K) holds one block per
    (joint, neighbour) edge in CSR order; ``bias`` is (J, C_out).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    E, Co, Ci, K = weight.shape
    if K % 2 == 0:
        raise InvalidKernel(f"kernel width must be odd, got {K}")
    if x.ndim != 4 or x.shape[2] != layout.num_joints or x.shape[3] != Ci:
        raise ShapeMismatch(f"features {x.shape} do not match J={layout.num_joints}, C_in={Ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (layout.num_joints, Co):
            raise ShapeMismatch(f"bias must be ({layout.num_joints}, {Co}), got {bias.shape}")
    pad = (K - 1) // 2 if padding is None else padding
    return _skconv(x, weight, bias, layout, 1, pad)


# ------------------------------------------------------------- joint pooling


def group_mean(x, groups, axis=-2) -> Tensor:
    """Mean over member indices along ``axis`` for each group, summed in member order."""
    x = as_tensor(x)
    ax = axis % x.ndim
    v = np.moveaxis(x.value, ax, 0)
    out = np.empty((len(groups),) + v.shape[1:])
    for gi, members in enumerate(groups):
        acc = v[members[0]].copy()
        for m in members[1:]:
            acc += v[m]
        out[gi] = acc * (1.0 / len(members))
    shape = x.shape

    def bw(g):
        gm = np.moveaxis(g, ax, 0)
        full = np.zeros((shape[ax],) + gm.shape[1:])
        for gi, members in enumerate(groups):
            part = gm[gi] * (1.0 / len(members))
            for m in members:
                full[m] += part
        return (np.moveaxis(full, 0, ax),)

    return _result(np.moveaxis(out, 0, ax), (x,), bw)


def time_pool2(x, axis=1) -> Tensor:
    """Stride-2 mean of adjacent frames; the length must be even."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if n % 2:
        raise ShapeMismatch(f"temporal pooling needs an even length, got {n}")
    even = np.take(x.value, np.arange(0, n, 2), axis=ax)
    odd = np.take(x.value, np.arange(1, n, 2), axis=ax)

    def bw(g):
        return (np.repeat(g * 0.5, 2, axis=ax),)

    return _result((even + odd) * 0.5, (x,), bw)


def time_upsample2(x, axis=1) -> Tensor:
    """Nearest-neighbour temporal upsampling by 2."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]

    def bw(g):
        return (np.take(g, np.arange(0, 2 * n, 2), axis=ax) + np.take(g, np.arange(1, 2 * n, 2), axis=ax),)

    return _result(np.repeat(x.value, 2, axis=ax), (x,), bw)


# --------------------------------------------------------------- grad check


def grad_check(f, point: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps ``point`` to a scalar Tensor. ``coords`` optionally restricts the
    check to a subset of flat indices.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-7, 1e-3]")
    was = point.requires_grad
    point.requires_grad = True
    saved = point.grad
    point.grad = None
    try:
        loss = f(point)
        backward(loss)
        analytic = np.zeros(point.shape) if point.grad is None else point.grad.copy()
        flat = point.value.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(point).value)
            flat[i] = orig - h
            fm = float(f(point).value)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        return worst
    finally:
        point.grad = saved
        point.requires_grad = was
