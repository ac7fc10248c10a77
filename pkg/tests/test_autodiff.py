"""Primitive-level gradient checks for the autodiff engine."""

import numpy as np
import pytest

from vlcontrast import autodiff as ad


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(x)
        flat[i] = orig - h
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def check_op(build, x: np.ndarray, tol: float = 1e-7):
    """Compare analytic and numeric gradients of scalar build(Tensor)."""
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    num = numeric_grad(lambda v: build(ad.Tensor(v)).item(), x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


RNG = np.random.default_rng(0)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: (t * 3.0 + 1.5).sum(),
        lambda t: (t * t).mean(),
        lambda t: ad.exp(t * 0.3).sum(),
        lambda t: ad.log(t * t + 1.0).sum(),
        lambda t: ad.tanh(t).sum(),
        lambda t: ad.gelu(t).sum(),
        lambda t: ad.power(t * t + 0.5, 0.5).sum(),
        lambda t: (t / (t * t + 2.0)).sum(),
        lambda t: ad.softmax(t, axis=-1).sum(axis=0)[1],
        lambda t: ad.log_softmax(t, axis=-1).mean(),
        lambda t: ad.logsumexp(t, axis=-1).sum(),
        lambda t: ad.l2_normalize(t, axis=-1).sum(axis=-1).mean(),
    ],
)
def test_elementwise_grads(build):
    check_op(build, RNG.normal(size=(3, 5)))


def test_matmul_grad():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3, 2))
    ta = ad.Tensor(a, requires_grad=True)
    tb = ad.Tensor(b, requires_grad=True)
    (ta @ tb).sum().backward()
    na = numeric_grad(lambda v: float((v @ b).sum()), a.copy())
    nb = numeric_grad(lambda v: float((a @ v).sum()), b.copy())
    np.testing.assert_allclose(ta.grad, na, atol=1e-7)
    np.testing.assert_allclose(tb.grad, nb, atol=1e-7)


def test_matmul_batched_broadcast_grad():
    a = RNG.normal(size=(2, 3, 4, 5))
    b = RNG.normal(size=(5, 6))
    tb = ad.Tensor(b, requires_grad=True)
    (ad.Tensor(a) @ tb).sum().backward()
    nb = numeric_grad(lambda v: float((a @ v).sum()), b.copy())
    np.testing.assert_allclose(tb.grad, nb, atol=1e-6)


def test_take_grads_accumulate_duplicates():
    w = RNG.normal(size=(6, 3))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    tw = ad.Tensor(w, requires_grad=True)
    tw[ids].sum().backward()
    expected = np.zeros_like(w)
    np.add.at(expected, ids, np.ones(ids.shape + (3,)))
    np.testing.assert_allclose(tw.grad, expected)


def test_take_tuple_indexing():
    x = RNG.normal(size=(4, 7))
    rows = np.arange(4)
    cols = np.array([1, 3, 0, 6])
    t = ad.Tensor(x, requires_grad=True)
    (t[(rows, cols)] * 2.0).sum().backward()
    expected = np.zeros_like(x)
    expected[rows, cols] = 2.0
    np.testing.assert_allclose(t.grad, expected)


def test_concat_and_slice_grad():
    a = RNG.normal(size=(2, 3))
    b = RNG.normal(size=(2, 4))
    ta = ad.Tensor(a, requires_grad=True)
    tb = ad.Tensor(b, requires_grad=True)
    out = ad.concat([ta, tb], axis=1)
    out[:, 2:5].sum().backward()
    np.testing.assert_allclose(ta.grad, [[0, 0, 1], [0, 0, 1]])
    np.testing.assert_allclose(tb.grad, [[1, 1, 0, 0], [1, 1, 0, 0]])


def test_broadcast_add_unbroadcasts():
    a = RNG.normal(size=(4, 3))
    bias = RNG.normal(size=(3,))
    tb = ad.Tensor(bias, requires_grad=True)
    (ad.Tensor(a) + tb).sum().backward()
    np.testing.assert_allclose(tb.grad, np.full(3, 4.0))


def test_transpose_reshape_grad():
    x = RNG.normal(size=(2, 3, 4))
    t = ad.Tensor(x, requires_grad=True)
    y = ad.transpose(t, (1, 0, 2)).reshape((3, 8))
    (y * y).sum().backward()
    np.testing.assert_allclose(t.grad, 2 * x)


def test_reused_node_accumulates():
    x = np.array([1.0, 2.0])
    t = ad.Tensor(x, requires_grad=True)
    y = t * t + t * 3.0
    y.sum().backward()
    np.testing.assert_allclose(t.grad, 2 * x + 3.0)


def test_no_grad_blocks_graph():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = (t * 2.0).sum()
    assert not out.requires_grad
    assert ad.is_grad_enabled()


def test_detach_stops_gradient():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    (t.detach() * t).sum().backward()
    np.testing.assert_allclose(t.grad, np.ones(3))


def test_l2_normalize_unit_norm_and_zero_guard():
    x = RNG.normal(size=(5, 8))
    out = ad.l2_normalize(ad.Tensor(x)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)
    zero = ad.l2_normalize(ad.Tensor(np.zeros((1, 8)), requires_grad=True))
    assert np.all(np.isfinite(zero.data))
    zero.sum().backward()  # must not produce NaNs at the kink


def test_layer_norm_affine_grads():
    x = RNG.normal(size=(4, 6))
    gain = RNG.normal(size=(6,)) + 1.0
    bias = RNG.normal(size=(6,))
    tx = ad.Tensor(x.copy(), requires_grad=True)
    tg = ad.Tensor(gain.copy(), requires_grad=True)
    tb = ad.Tensor(bias.copy(), requires_grad=True)
    (ad.layer_norm_affine(tx, tg, tb, 1e-5) ** 2.0).sum().backward()

    def fn(xv, gv, bv):
        return float((ad.layer_norm_affine(ad.Tensor(xv), ad.Tensor(gv), ad.Tensor(bv), 1e-5) ** 2.0).sum().item())

    nx = numeric_grad(lambda v: fn(v, gain, bias), x.copy())
    ng = numeric_grad(lambda v: fn(x, v, bias), gain.copy())
    nb = numeric_grad(lambda v: fn(x, gain, v), bias.copy())
    np.testing.assert_allclose(tx.grad, nx, atol=1e-6)
    np.testing.assert_allclose(tg.grad, ng, atol=1e-6)
    np.testing.assert_allclose(tb.grad, nb, atol=1e-6)


def test_softmax_rows_sum_to_one():
    x = RNG.normal(size=(5, 9)) * 10
    y = ad.softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
