import numpy as np
import pytest

from ikmr import _kernels
from ikmr import autodiff as ad
from ikmr.skeleton import tree_adjacency

from oracles import naive_skeletal_conv

BACKENDS = sorted(_kernels.BACKENDS)


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(prev)


def make_case(rng, parent=(-1, 0, 1, 1, 0), B=2, T=7, Ci=3, Co=4, K=3):
    adj = tree_adjacency(parent, 1)
    layout = ad.ConvLayout(adj)
    x = rng.standard_normal((B, T, len(parent), Ci))
    w = rng.standard_normal((layout.num_edges, Co, Ci, K))
    b = rng.standard_normal((len(parent), Co))
    return adj, layout, x, w, b


def test_forward_matches_naive(backend, rng):
    adj, layout, x, w, b = make_case(rng)
    out = ad.skeletal_conv_op(x, w, b, layout)
    assert np.allclose(out.value, naive_skeletal_conv(x, w, b, adj), atol=1e-12)


def test_gradients(backend, rng):
    adj, layout, x, w, b = make_case(rng, B=2, T=5)
    g = ad.Tensor(rng.standard_normal((2, 5, 5, 4)))
    args = [ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)]
    for which in range(3):
        def f(p, which=which):
            a = list(args)
            a[which] = p
            return ad.sum(ad.mul(ad.skeletal_conv_op(a[0], a[1], a[2], layout), g))

        assert ad.grad_check(f, args[which]) < 1e-7


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    adj, layout, x, w, b = make_case(rng, B=3, T=16, Ci=5, Co=6, K=5)
    res = {}
    for be in BACKENDS:
        prev = _kernels.set_backend(be)
        try:
            xt, wt = ad.Tensor(x, requires_grad=True), ad.Tensor(w, requires_grad=True)
            out = ad.skeletal_conv_op(xt, wt, ad.Tensor(b), layout)
            ad.backward(ad.sum(ad.mul(out, out)))
            res[be] = (out.value, xt.grad, wt.grad)
        finally:
            _kernels.set_backend(prev)
    for a, c in zip(res["python"], res["compiled"]):
        assert np.allclose(a, c, rtol=1e-12, atol=1e-12)


def test_batch_invariance(backend, rng):
    adj, layout, x, w, b = make_case(rng, B=6, T=16, Ci=7, Co=9, K=5)
    full = ad.skeletal_conv_op(x, w, b, layout).value
    for i in range(6):
        one = ad.skeletal_conv_op(x[i : i + 1], w, b, layout).value
        assert np.array_equal(one[0], full[i])


def test_set_backend_rejects_unknown():
    with pytest.raises(ValueError):
        _kernels.set_backend("gpu")
    assert _kernels.active_name() in _kernels.BACKENDS
