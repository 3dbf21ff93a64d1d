import math

import numpy as np
import pytest

from gmcloss import autodiff as ad

RNG = np.random.default_rng(7)


def _param(*shape, low=-1.0, high=1.0):
    return ad.Tensor(RNG.uniform(low, high, shape), requires_grad=True)


UNARY = {
    "exp": (ad.exp, {}),
    "log": (ad.log, {"low": 0.5, "high": 2.0}),
    "sqrt": (ad.sqrt, {"low": 0.5, "high": 2.0}),
    "tanh": (ad.tanh, {}),
    "cos": (ad.cos, {}),
    "arccos": (ad.arccos, {"low": -0.9, "high": 0.9}),
    "softmax": (lambda x: ad.softmax(x, axis=1), {}),
    "log_softmax": (lambda x: ad.log_softmax(x, axis=0), {}),
    "logsumexp": (lambda x: ad.logsumexp(x, axis=1), {}),
    "l2_norm": (lambda x: ad.l2_norm(x, axis=1), {}),
    "transpose": (lambda x: x.T, {}),
    "getitem": (lambda x: x[np.array([0, 2, 2]), np.array([1, 0, 0])], {}),
    "mean": (lambda x: ad.mean(x, axis=0), {}),
    "reshape": (lambda x: ad.reshape(x, (4, 3)), {}),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, kw = UNARY[name]
    x = _param(3, 4, **kw)
    w = RNG.normal(size=fn(x).shape)
    assert ad.grad_check(lambda: ad.tsum(fn(x) * w), [x]) < 1e-6


BINARY = {
    "add_broadcast": lambda a, b: a + b[0],
    "sub": lambda a, b: a - b,
    "mul_broadcast": lambda a, b: a * ad.reshape(b[:, 0], (3, 1)),
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: a @ b.T,
    "minimum": lambda a, b: ad.minimum(a, b),
    "cosine_matrix": lambda a, b: ad.cosine_matrix(a, b),
    "cosine_similarity": lambda a, b: ad.cosine_similarity(a, b),
    "concat": lambda a, b: ad.concat([a, b], axis=0),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    a, b = _param(3, 4), _param(3, 4)
    fn = BINARY[name]
    w = RNG.normal(size=fn(a, b).shape)
    assert ad.grad_check(lambda: ad.tsum(fn(a, b) * w), [a, b]) < 1e-6


def test_attention_and_affine_gradients():
    x = _param(2, 3, 4)
    wq, wk, wv = _param(4, 2), _param(4, 2), _param(4, 3)
    w, b = _param(3, 2), _param(2)

    def f():
        h = ad.self_attention(x, wq, wk, wv)
        return ad.tsum(ad.tanh(ad.affine(h, w, b)))

    assert ad.grad_check(f, [x, wq, wk, wv, w, b]) < 1e-6


def test_linearity_of_backward():
    x = _param(5)
    c = RNG.normal(size=5)
    y = ad.tsum(ad.exp(x) * c) * 3.0 + ad.tsum(ad.exp(x) * c) * 2.0
    y.backward()
    np.testing.assert_allclose(x.grad, 5.0 * c * np.exp(x.data), rtol=1e-12)


def test_grads_accumulate_across_backward_calls():
    x = _param(3)
    ad.tsum(x * x).backward()
    first = x.grad.copy()
    ad.tsum(x * x).backward()
    np.testing.assert_allclose(x.grad, 2 * first)
    x.zero_grad()
    assert not x.grad.any()


def test_reused_node_gets_summed_gradient():
    x = _param(1)
    y = x * x
    z = y + y * y
    z.backward()
    v = x.data[0]
    assert x.grad[0] == pytest.approx(2 * v + 4 * v ** 3, rel=1e-12)


def test_only_leaves_receive_grad():
    x = _param(2)
    mid = x * 2.0
    ad.tsum(mid).backward()
    assert mid.grad is None or not np.any(mid.grad)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_arccos_clamp_has_zero_gradient():
    x = ad.Tensor(np.array([1.0, -1.0, 0.0]), requires_grad=True)
    y = ad.arccos(x)
    assert y.data[0] == pytest.approx(math.acos(1 - ad.CLAMP_EPS))
    ad.tsum(y).backward()
    assert x.grad[0] == 0.0 and x.grad[1] == 0.0 and x.grad[2] == pytest.approx(-1.0)


def test_minimum_tie_routes_to_first_argument():
    a = ad.Tensor(np.array([1.0]), requires_grad=True)
    b = ad.Tensor(np.array([1.0]), requires_grad=True)
    ad.tsum(ad.minimum(a, b)).backward()
    assert a.grad[0] == 1.0 and b.grad[0] == 0.0


def test_non_finite_forward_raises():
    x = ad.Tensor(np.array([0.0, 1.0]))
    with np.errstate(divide="ignore"), pytest.raises(ad.NonFiniteError, match="log"):
        ad.log(x)
    with pytest.raises(ValueError, match="zero-norm"):
        ad.l2_norm(ad.Tensor(np.zeros((1, 3))), axis=1)


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_no_grad_builds_no_graph():
    x = _param(2)
    with ad.no_grad():
        y = ad.tsum(x * x)
    assert not y.requires_grad


@pytest.mark.parametrize("order", [2, 4, 6])
def test_stencils_are_exact_on_cubics(order):
    x = ad.Tensor(np.array([0.3, -1.2]), requires_grad=True)
    num = ad.numeric_grad(lambda: ad.tsum(x * x * x), x, h=1e-3, order=order)
    tol = 1e-6 if order == 2 else 1e-9
    np.testing.assert_allclose(num, 3 * x.data ** 2, atol=tol)


def test_grad_check_requires_scalar():
    x = _param(2)
    with pytest.raises(ad.ShapeError):
        ad.grad_check(lambda: x * 1.0, [x])
