import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cnnkit import functional as F
from cnnkit.gradcheck import finite_diff_check
from cnnkit.tensor import (DEFAULT_DTYPE, Parameter, Tensor, backward, clamp, concat, cos, exp, log, mean,
                           no_grad, recording, split, sqrt, tsum)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def grad_of(f, x):
    p = Parameter(np.array(x, dtype=np.float64), kind="input")
    with recording() as tape:
        backward(f(p), tape)
    return p.grad


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == DEFAULT_DTYPE == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_zero_dim_stays_zero_dim():
    assert Tensor(np.float64(2.0)).shape == ()


def test_backward_accumulates_into_parameters():
    p = Parameter(np.array([1.0, 2.0], np.float64))
    for _ in range(2):
        with recording() as tape:
            backward(tsum(p * p), tape)
    assert np.array_equal(p.grad, [4.0, 8.0])


def test_backward_rejects_non_scalar_and_foreign_loss():
    p = Parameter(np.ones(3))
    with recording() as tape:
        y = p * 2.0
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)
    with pytest.raises(ValueError):
        backward(tsum(Tensor(np.ones(3))), tape)


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with recording() as tape:
        with no_grad():
            tsum(p * p)
    assert len(tape) == 0


def test_broadcast_gradient_is_summed():
    a = Parameter(np.ones((3, 4)))
    b = Parameter(np.ones((4,)))
    with recording() as tape:
        backward(tsum(a * b), tape)
    assert np.array_equal(b.grad, np.full(4, 3.0))


def test_empty_batch_extents():
    x = Tensor(np.zeros((0, 3, 5, 5)))
    w = Tensor(np.ones((2, 3, 3, 3)))
    assert F.conv2d(x, w).shape == (0, 2, 5, 5)


@given(arrays(np.float64, (3, 4), elements=finite))
def test_elementwise_ops_match_finite_differences(x):
    fns = [lambda t: tsum(exp(t) * cos(t)),
           lambda t: tsum(log(t * t + 1.0)),
           lambda t: tsum(sqrt(t * t + 0.5)),
           lambda t: tsum(t / (t * t + 2.0)),
           lambda t: tsum(mean(t ** 3, axis=1))]
    for f in fns:
        assert finite_diff_check(f, x).max_rel_error < 1e-4


@given(arrays(np.float64, (2, 6), elements=finite))
def test_shape_ops_roundtrip_gradients(x):
    def f(t):
        a, b = split(t, 2, axis=1)
        y = concat([b, a], axis=0).reshape(4, 3).transpose(1, 0)
        return tsum(y * Tensor(np.arange(12.0).reshape(3, 4)))
    g = grad_of(f, x)
    assert finite_diff_check(f, x).max_rel_error < 1e-6
    assert g.shape == x.shape


def test_clamp_gradient_is_zero_outside():
    g = grad_of(lambda t: tsum(clamp(t, -1.0, 1.0)), [-2.0, 0.0, 2.0])
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_matmul_and_getitem():
    a = np.arange(6.0).reshape(2, 3)
    b = np.arange(12.0).reshape(3, 4)
    f = lambda t: tsum((t @ Tensor(b))[1, 1:3])
    assert finite_diff_check(f, a).max_rel_error < 1e-7


def test_softmax_cross_entropy_value():
    logits = Tensor(np.zeros((2, 4)))
    t = np.eye(4)[[0, 3]]
    assert np.isclose(float(F.softmax_cross_entropy(logits, t).data), np.log(4))


@given(st.sampled_from([1, 3]), st.integers(1, 2), st.sampled_from([0, 1, None]))
def test_conv2d_matches_direct_sum(k, stride, pad):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, k, k))
    out = F.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    p = (k - 1) // 2 if pad is None else pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (6 + 2 * p - k) // stride + 1
    ref = np.zeros((2, 4, ho, ho))
    for i in range(ho):
        for j in range(ho):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w)
    assert np.allclose(out, ref)


def test_conv_and_batchnorm_gradients():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    gamma, beta = Tensor(rng.random(3) + 0.5), Tensor(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    probe = rng.standard_normal((2, 3, 3, 3))

    def f(x):
        y = F.conv2d(x, w, stride=2, padding=1)
        y = F.batch_norm(y, gamma, beta, rm.copy(), rv.copy())
        return tsum(y * Tensor(probe))

    assert finite_diff_check(f, rng.standard_normal((2, 2, 5, 5))).max_rel_error < 1e-5


def test_batchnorm_running_stats_update():
    x = Tensor(np.arange(8.0).reshape(2, 1, 2, 2))
    rm, rv = np.zeros(1), np.ones(1)
    F.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, momentum=0.9)
    assert np.isclose(rm[0], 0.1 * 3.5)
    assert np.isclose(rv[0], 0.9 + 0.1 * np.var(np.arange(8.0), ddof=1))


def test_pool_and_resize_gradients():
    rng = np.random.default_rng(2)
    probe = rng.standard_normal((1, 2, 3, 3))
    f = lambda t: tsum(F.pool2d(t, "avg", 3, 2, 1) * Tensor(probe))
    assert finite_diff_check(f, rng.standard_normal((1, 2, 6, 6))).max_rel_error < 1e-6
    probe2 = rng.standard_normal((1, 2, 7, 5))
    g = lambda t: tsum(F.resize_bilinear(t, 7, 5) * Tensor(probe2))
    assert finite_diff_check(g, rng.standard_normal((1, 2, 4, 3))).max_rel_error < 1e-6


def test_reflect_pad_gradient():
    rng = np.random.default_rng(3)
    probe = rng.standard_normal((1, 1, 7, 8))
    f = lambda t: tsum(F.pad2d(t, (1, 2, 2, 1), mode="reflect") * Tensor(probe))
    assert finite_diff_check(f, rng.standard_normal((1, 1, 4, 5))).max_rel_error < 1e-7
