import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ganlab import tensor as T
from ganlab.errors import DegenerateBatchError, NumericError, ParameterError, ShapeError
from ganlab.gradcheck import check_grad, numeric_grad
from ganlab.rng import RngStream, sample
from ganlab.tensor import Tensor


def rand(rng, *shape):
    return rng.standard_normal(shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_hand_values():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[19, 22], [43, 50]]


def test_matmul_grad_is_b_transpose(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    ta = Tensor(a, requires_grad=True)
    T.matmul(ta, Tensor(b)).sum().backward()
    assert np.allclose(ta.grad, np.ones((3, 2)) @ b.T)
    ok, _ = check_grad(lambda x, y: (x @ y).sum(), [a, b], rtol=1e-6)
    assert ok


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_grad(rng):
    ok, _ = check_grad(lambda x, y: (T.matmul(x, y) ** 2).sum(), [rand(rng, 2, 3, 2), rand(rng, 2, 2)])
    assert ok


# -- conv -----------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rand(rng, 2, 1, 4, 5)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 4.0)


def test_conv_matches_direct_loops(rng):
    x, k = rand(rng, 2, 3, 6, 5), rand(rng, 4, 3, 3, 2)
    out = T.conv2d(Tensor(x), Tensor(k), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 2) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for f in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, f, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 2] * k[f])
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_grad(rng):
    x, k = rand(rng, 1, 2, 4, 4), rand(rng, 2, 2, 3, 3)
    ok, _ = check_grad(lambda a, b: (T.conv2d(a, b, 2, 1) ** 2).sum(), [x, k], rtol=1e-6)
    assert ok


@pytest.mark.parametrize("stride,pad", [(0, 0), (1, -1)])
def test_conv_bad_params(stride, pad):
    with pytest.raises(ParameterError):
        T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), stride, pad)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))), 1, 0)


def test_conv_transpose_replicates_single_pixel():
    out = T.conv2d_transpose(Tensor([[[[2.5]]]]), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 2.5)


def test_conv_transpose_grad(rng):
    y, k = rand(rng, 1, 2, 3, 3), rand(rng, 2, 1, 3, 3)
    ok, _ = check_grad(lambda a, b: (T.conv2d_transpose(a, b, 2, 1, 1) ** 2).sum(), [y, k], rtol=1e-6)
    assert ok


def adjoint_gap(seed, n, c, f, h, w, kh, kw, stride, pad):
    rng = np.random.default_rng(seed)
    x, k = rng.standard_normal((n, c, h, w)), rng.standard_normal((f, c, kh, kw))
    fwd = T.conv2d(Tensor(x), Tensor(k), stride, pad).data
    y = rng.standard_normal(fwd.shape)
    # output_padding that makes the transpose land back on x's shape
    op = h + 2 * pad - kh - (fwd.shape[2] - 1) * stride
    back = T.conv2d_transpose(Tensor(y), Tensor(k), stride, pad, op).data
    assert back.shape == x.shape
    return float(np.sum(fwd * y)), float(np.sum(x * back))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3),
       hw=st.integers(3, 9), k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2))
def test_conv_transpose_is_adjoint(seed, n, c, f, hw, k, stride, pad):
    lhs, rhs = adjoint_gap(seed, n, c, f, hw, hw, k, k, stride, pad)
    assert math.isclose(lhs, rhs, rel_tol=1e-10, abs_tol=1e-12)


# -- activations ------------------------------------------------------------

def test_activation_values():
    assert T.relu(Tensor([-2.0, 3.0])).data.tolist() == [0.0, 3.0]
    assert T.leaky_relu(Tensor(-2.0), 0.2).item() == pytest.approx(-0.4, abs=1e-15)
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.tanh(Tensor(0.0)).item() == 0.0


def test_leaky_relu_slope_at_zero():
    x = Tensor([0.0], requires_grad=True)
    T.leaky_relu(x, 0.2).sum().backward()
    assert x.grad[0] == 0.2


def test_leaky_relu_rejects_bad_slope():
    with pytest.raises(ParameterError):
        T.leaky_relu(Tensor(1.0), 1.5)


@pytest.mark.parametrize("kind", ["relu", "lrelu", "tanh", "sigmoid"])
def test_activation_grads(rng, kind):
    x = rand(rng, 4, 3)
    x[np.abs(x) < 1e-3] = 0.5
    ok, _ = check_grad(lambda a: (T.activation(a, kind) * Tensor(np.arange(12.0).reshape(4, 3))).sum(), [x])
    assert ok


def test_sigmoid_extreme_inputs_finite():
    out = T.sigmoid(Tensor([-800.0, 800.0]))
    assert out.data.tolist() == [0.0, 1.0]


# -- softmax ------------------------------------------------------------------

def test_softmax_values():
    assert np.allclose(T.softmax(Tensor(np.zeros(3))).data, 1 / 3, rtol=0, atol=1e-15)
    assert np.allclose(T.softmax(Tensor([math.log(2), 0.0])).data, [2 / 3, 1 / 3], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(xs, shift):
    x = np.array(xs)
    p = T.softmax(Tensor(x)).data
    assert abs(p.sum() - 1) < 1e-12
    assert np.all(p > 0) or len(xs) > 1
    assert np.allclose(T.softmax(Tensor(x + shift)).data, p, rtol=0, atol=1e-12)


def test_softmax_grad(rng):
    w = rand(rng, 3, 4)
    ok, _ = check_grad(lambda a: (T.softmax(a, axis=1) * Tensor(w)).sum(), [rand(rng, 3, 4)])
    assert ok


# -- batchnorm ------------------------------------------------------------------

def bn(x, gamma, beta, train=True):
    c = x.shape[1]
    return T.batchnorm(x, gamma, beta, np.zeros(c), np.ones(c), train=train)


def test_batchnorm_normalizes(rng):
    x = rand(rng, 16, 3, 4, 4) * 3 + 2
    out = bn(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_affine(rng):
    x = rand(rng, 64, 2)
    x = (x - x.mean(0)) / x.std(0)
    out = bn(Tensor(x), Tensor([2.0, 2.0]), Tensor([3.0, 3.0])).data
    assert np.allclose(out.mean(0), 3, atol=1e-12)
    assert np.allclose(out.std(0), 2, atol=1e-4)


def test_batchnorm_grad(rng):
    w = rand(rng, 4, 2, 2, 2)
    build = lambda x, g, b: (bn(x, g, b) * Tensor(w)).sum()
    ok, _ = check_grad(build, [rand(rng, 4, 2, 2, 2), rand(rng, 2), rand(rng, 2)], rtol=1e-5)
    assert ok


def test_batchnorm_running_stats_and_eval(rng):
    x = rand(rng, 32, 3) * 2 + 5
    rm, rv = np.zeros(3), np.ones(3)
    T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=True, momentum=1.0)
    assert np.allclose(rm, x.mean(0))
    assert np.allclose(rv, x.var(0, ddof=1))
    out = T.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=False).data
    assert np.allclose(out, (x - rm) / np.sqrt(rv + 1e-5))


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        bn(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# -- backward -------------------------------------------------------------------

def test_backward_polynomial(rng):
    x = Tensor(rand(rng, 5), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * 3).sum().backward()
    (x * 3).sum().backward()
    assert x.grad.tolist() == [6.0, 6.0]


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        (Tensor([1.0, 2.0], requires_grad=True) * 2).backward()


def grad_norm_of_linear(w_arr, x_arr):
    w = Tensor(w_arr, requires_grad=True)
    x = Tensor(x_arr, requires_grad=True)
    (gx,) = T.grad((w * x).sum(), [x], create_graph=True)
    return w, T.sqrt((gx * gx).sum())


def test_second_order_gradient_of_gradient_norm(rng):
    w_arr, x_arr = rand(rng, 4), rand(rng, 4)
    w, g = grad_norm_of_linear(w_arr, x_arr)
    g.backward()
    assert np.allclose(w.grad, w_arr / np.linalg.norm(w_arr), rtol=1e-12)

    # nested finite differences: the inner gradient is itself a finite difference
    def outer(arrs):
        (wa,) = arrs
        inner = numeric_grad(lambda a: float(np.sum(wa * a[0])), [x_arr])[0]
        return float(np.linalg.norm(inner))

    num = numeric_grad(outer, [w_arr])[0]
    assert np.allclose(w.grad, num, rtol=1e-4)


def test_second_order_through_mlp(rng):
    w1, w2, x = rand(rng, 2, 3), rand(rng, 3, 1), rand(rng, 4, 2)

    def build(a, b):
        xt = Tensor(x, requires_grad=True)
        out = T.tanh(xt @ a) @ b
        (gx,) = T.grad(out.sum(), [xt], create_graph=True)
        n = T.sqrt((gx * gx).sum(axis=1) + 1e-12)
        return ((n - 1.0) ** 2).mean()

    def num_fn(arrs):
        a, b = arrs
        h = np.tanh(x @ a)
        gx = ((1 - h ** 2) * b.T) @ a.T
        n = np.sqrt((gx ** 2).sum(1) + 1e-12)
        return float(((n - 1) ** 2).mean())

    from ganlab.gradcheck import analytic_grad
    ana = analytic_grad(build, [w1, w2])
    num = numeric_grad(num_fn, [w1, w2])
    for a, n in zip(ana, num):
        assert np.allclose(a, n, rtol=1e-4, atol=1e-9)


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        T.log(Tensor([-1.0]))


def test_getitem_concat_grads(rng):
    a, b = rand(rng, 2, 3), rand(rng, 2, 2)
    w = rand(rng, 2, 4)
    ok, _ = check_grad(lambda x, y: (T.concat([x[:, 1:], y], axis=1) * Tensor(w)).sum(), [a, b])
    assert ok


# -- sampling -------------------------------------------------------------------

def test_uniform_rejects_empty_range():
    with pytest.raises(ParameterError):
        RngStream(0).uniform(0.0, 0.0, 3)


def test_sampling_is_deterministic():
    a = sample(RngStream(42, "z"), "uniform", (4, 3)).data
    b = sample(RngStream(42, "z"), "uniform", (4, 3)).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, sample(RngStream(43, "z"), "uniform", (4, 3)).data)


def test_uniform_moments():
    x = sample(RngStream(7, "z"), "uniform", (100_000,)).data
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1 / 3) < 0.02


def test_streams_are_independent():
    from ganlab.rng import RngStreams
    s1, s2 = RngStreams(3), RngStreams(3)
    s1["data"].uniform(0, 1, 100)
    assert np.array_equal(s1["z"].uniform(-1, 1, 5), s2["z"].uniform(-1, 1, 5))
    assert s1.draw_counts() == {"data": 100, "z": 5}
