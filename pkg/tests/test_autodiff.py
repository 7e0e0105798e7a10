import importlib

import numpy as np
import pytest

from ikmr import autodiff as ad
from ikmr.autodiff import checkpoint
from ikmr.errors import CheckpointError, InvalidKernel, NotScalar, ShapeMismatch

from conftest import random_quats
from oracles import naive_conv1d

tensor_mod = importlib.import_module("ikmr.autodiff.tensor")


def weighted(fn, shape_out, rng):
    w = ad.Tensor(rng.standard_normal(shape_out))
    return lambda p: ad.sum(ad.mul(fn(p), w))


def test_backward_requires_scalar():
    x = ad.tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NotScalar):
        ad.backward(ad.scale(x, 2.0))


def test_only_scalar_broadcasting():
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones((2, 3)), np.ones(3))
    y = ad.add(ad.tensor(np.ones((2, 3))), 2.0)
    assert np.all(y.value == 3.0)


def test_scalar_broadcast_gradient():
    s = ad.tensor(1.5, requires_grad=True)
    x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, s)))
    assert s.grad == pytest.approx(15.0)
    assert np.allclose(x.grad, 1.5)


def test_leaf_gradients_accumulate():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    ad.backward(ad.sum(x))
    assert np.allclose(x.grad, [3.0, 5.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_shared_subexpression_gradient():
    x = ad.tensor([3.0], requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.sum(ad.add(y, y)))
    assert np.allclose(x.grad, [12.0])


def test_no_grad_inputs_skip_tape():
    y = ad.mul(ad.tensor([1.0]), ad.tensor([2.0]))
    assert not y.requires_grad and y._backward is None


def test_broadcast_to_gradient(rng):
    x = ad.tensor(rng.standard_normal((1, 3, 1)))
    f = weighted(lambda p: ad.broadcast_to(p, (2, 4, 3, 5)), (2, 4, 3, 5), rng)
    assert ad.grad_check(f, x) < 1e-8
    with pytest.raises(ShapeMismatch):
        ad.broadcast_to(x, (2, 2, 2))


@pytest.mark.parametrize(
    "name, fn, shape",
    [
        ("sub", lambda p: ad.sub(p, ad.scale(p, 0.3)), (3, 4)),
        ("mul", lambda p: ad.mul(p, ad.reshape(ad.transpose(p, (1, 0)), (3, 4))), (3, 4)),
        ("mean", lambda p: ad.mean(ad.mul(p, p)), (3, 4)),
        ("mse", lambda p: ad.mse(p, ad.Tensor(np.ones((3, 4)))), (3, 4)),
        ("leaky_relu", lambda p: ad.leaky_relu(p, 0.2), (3, 4)),
        ("concat", lambda p: ad.concat([p, ad.scale(p, 2.0)], axis=0), (3, 4)),
        ("stack", lambda p: ad.stack([p, ad.mul(p, p)], axis=1), (3, 4)),
        ("take", lambda p: ad.take(p, [2, 0, 2], axis=1), (3, 4)),
        ("take_int", lambda p: ad.take(p, 1, axis=0), (3, 4)),
        ("normalize_last", lambda p: ad.normalize_last(p), (3, 4)),
        ("hemisphere_sign", lambda p: ad.hemisphere_sign(p), (3, 4)),
        ("qconj", lambda p: ad.qconj(p), (3, 4)),
        ("qmul", lambda p: ad.qmul(p, ad.take(p, [2, 0, 1], axis=0)), (3, 4)),
        ("group_mean", lambda p: ad.group_mean(p, [(0, 2), (1,)], axis=0), (3, 4)),
        ("time_pool2", lambda p: ad.time_pool2(p, axis=1), (3, 4)),
        ("time_upsample2", lambda p: ad.time_upsample2(p, axis=1), (3, 4)),
    ],
)
def test_op_gradients(name, fn, shape, rng):
    x = ad.tensor(rng.standard_normal(shape))
    out_shape = fn(ad.tensor(x.value.copy())).shape
    f = (lambda p: fn(p)) if out_shape == () else weighted(fn, out_shape, rng)
    assert ad.grad_check(f, x, h=1e-5) < 1e-6, name


def test_qrotate_matches_numpy_and_gradient(rng):
    from ikmr import quat as Q

    q = random_quats(rng, (5,))
    v = rng.standard_normal((5, 3))
    out = ad.qrotate(ad.Tensor(q), ad.Tensor(v))
    assert np.allclose(out.value, Q.quat_rotate(q, v), atol=1e-12)
    f = weighted(lambda p: ad.qrotate(p, ad.Tensor(v)), (5, 3), rng)
    assert ad.grad_check(f, ad.Tensor(q)) < 1e-7


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 2), (2, 1), (3, 2)])
def test_temporal_conv1d_matches_loops(stride, pad, rng):
    x = rng.standard_normal((11, 3))
    w = rng.standard_normal((4, 3, 5))
    b = rng.standard_normal(4)
    out = ad.temporal_conv1d(x, w, b, stride=stride, padding=pad)
    assert np.allclose(out.value, naive_conv1d(x, w, b, stride, pad), atol=1e-12)
    batched = ad.temporal_conv1d(np.stack([x, 2 * x]), w, None, stride=stride, padding=pad)
    assert np.allclose(batched.value[1], naive_conv1d(2 * x, w, None, stride, pad), atol=1e-12)


def test_temporal_conv1d_gradients(rng):
    x = ad.tensor(rng.standard_normal((2, 9, 3)))
    w = ad.tensor(rng.standard_normal((4, 3, 3)))
    b = ad.tensor(rng.standard_normal(4))
    shape = ad.temporal_conv1d(x, w, b, stride=2, padding=1).shape
    g = ad.Tensor(rng.standard_normal(shape))
    for which in range(3):
        args = [x, w, b]

        def f(p, which=which):
            a = list(args)
            a[which] = p
            return ad.sum(ad.mul(ad.temporal_conv1d(*a, stride=2, padding=1), g))

        assert ad.grad_check(f, args[which]) < 1e-7


def test_temporal_conv1d_errors(rng):
    with pytest.raises(InvalidKernel):
        ad.temporal_conv1d(np.ones((5, 2)), np.ones((1, 2, 2)))
    with pytest.raises(ShapeMismatch):
        ad.temporal_conv1d(np.ones((5, 3)), np.ones((1, 2, 3)))
    with pytest.raises(ShapeMismatch):
        ad.temporal_conv1d(np.ones((2, 3)), np.ones((1, 3, 5)))


def test_grad_check_step_bounds():
    with pytest.raises(ValueError):
        ad.grad_check(lambda p: ad.sum(p), ad.tensor([1.0]), h=1e-2)


def test_grad_check_detects_wrong_gradient():
    def bad(x):
        return tensor_mod._result(np.sum(x.value**2), (x,), lambda g: (g * x.value,))

    assert ad.grad_check(bad, ad.tensor([1.0, 2.0])) > 0.1


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.weight": rng.standard_normal((2, 3, 4)), "b": np.array(3.5), "ü/x": np.zeros((0, 2))}
    checkpoint.save(tensors, tmp_path / "c.ckpt")
    back = checkpoint.load(tmp_path / "c.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k]) and np.array_equal(back[k], tensors[k])
    blob = (tmp_path / "c.ckpt").read_bytes()
    assert blob[:8] == b"IKMRCKPT"
    assert checkpoint.encode(back) == blob


def test_checkpoint_rejects_corruption(rng):
    blob = checkpoint.encode({"w": rng.standard_normal(5)})
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:-3])
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"NOTACKPT" + blob[8:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob[:8] + (99).to_bytes(4, "little") + blob[12:])
    with pytest.raises(CheckpointError):
        checkpoint.decode(blob + blob[12:])
