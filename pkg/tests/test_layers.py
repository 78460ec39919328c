import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covseg.layers import (
    BatchNormState,
    ConvParams,
    batchnorm2d,
    bce_loss,
    conv2d,
    depthwise_conv2d,
    maxpool2d,
    separable_conv2d,
    transposed_conv2d,
)
from covseg.selftest import GRAD_TOL, gradient_cases
from covseg.tensor import ShapeError, Tensor, backward, gradient_check, sum_all
from oracles import conv2d_loops, depthwise_loops, transposed_loops

SEEDS = range(10)


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def g64(seed):
    return np.random.Generator(np.random.PCG64(seed))


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_1x1(rng):
    x = T(rng.standard_normal((2, 1, 5, 5)))
    y = conv2d(x, ConvParams(T(np.ones((1, 1, 1, 1))), T([0.0])))
    assert np.array_equal(y.data, x.data)


def test_conv_all_ones_3x3():
    y = conv2d(T(np.ones((1, 1, 3, 3))), ConvParams(T(np.ones((1, 1, 3, 3))), T([0.0]), 1, 1)).data[0, 0]
    assert y.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3)])
def test_conv_matches_loops(seed, stride, pad, k):
    r = g64(seed)
    x, w, b = r.standard_normal((2, 3, 7, 7)), r.standard_normal((4, 3, k, k)), r.standard_normal(4)
    got = conv2d(T(x), ConvParams(T(w), T(b), stride, pad)).data
    assert np.allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ShapeError, match="channels"):
        conv2d(T(np.zeros((1, 2, 4, 4))), ConvParams(T(np.zeros((1, 3, 3, 3))), None, 1, 1))
    with pytest.raises(ShapeError, match="non-integral"):
        conv2d(T(np.zeros((1, 1, 6, 6))), ConvParams(T(np.zeros((1, 1, 3, 3))), None, 2, 1))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_same_padding_preserves_extent(k, rng):
    x = T(rng.standard_normal((1, 2, 9, 6)))
    y = conv2d(x, ConvParams(T(rng.standard_normal((3, 2, k, k))), None, 1, k // 2))
    assert y.shape[2:] == (9, 6)


def test_conv_gradient_on_spec_shape():
    r = g64(0)
    w, b = T(r.standard_normal((2, 2, 3, 3))), T(r.standard_normal(2))
    from covseg.tensor import relu

    err = gradient_check(lambda x: sum_all(relu(conv2d(x, ConvParams(w, b, 1, 1)))), T(r.standard_normal((1, 2, 6, 6))))
    assert err < 1e-4


# -- gradient suite ---------------------------------------------------------

CASE_NAMES = [name for name, _, _ in gradient_cases(0)]


@pytest.mark.parametrize("name", CASE_NAMES)
def test_gradients_ten_seeds(name):
    worst = 0.0
    for seed in SEEDS:
        fn, x = {n: (f, v) for n, f, v in gradient_cases(seed)}[name]
        worst = max(worst, gradient_check(fn, x, 1e-5))
    assert worst < GRAD_TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gamma_beta_gradients(seed):
    r = g64(seed)
    x = T(r.standard_normal((3, 2, 3, 3)))
    weights = T(r.standard_normal((3, 2, 3, 3)))

    def via_gamma(gm):
        s = BatchNormState.fresh(2, dtype=np.float64)
        s.gamma = gm
        return sum_all(batchnorm2d(x, s) * weights)

    def via_beta(bt):
        s = BatchNormState.fresh(2, dtype=np.float64)
        s.beta = bt
        return sum_all(batchnorm2d(x, s) * weights)

    assert gradient_check(via_gamma, T(r.standard_normal(2))) < 1e-3
    assert gradient_check(via_beta, T(r.standard_normal(2))) < 1e-3


# -- separable --------------------------------------------------------------


def test_separable_identity(rng):
    x = T(rng.standard_normal((1, 3, 5, 5)))
    dw = np.zeros((3, 1, 3, 3))
    dw[:, 0, 1, 1] = 1
    pw = np.eye(3).reshape(3, 3, 1, 1)
    y = separable_conv2d(x, ConvParams(T(dw), T(np.zeros(3)), 1, 1, True), ConvParams(T(pw), T(np.zeros(3))))
    assert np.allclose(y.data, x.data, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_separable_equals_composition(seed):
    r = g64(seed)
    x = r.standard_normal((2, 3, 6, 6))
    dw, db = r.standard_normal((3, 1, 3, 3)), r.standard_normal(3)
    pw, pb = r.standard_normal((4, 3, 1, 1)), r.standard_normal(4)
    got = separable_conv2d(T(x), ConvParams(T(dw), T(db), 1, 1, True), ConvParams(T(pw), T(pb))).data
    want = conv2d_loops(depthwise_loops(x, dw, db), pw, pb)
    assert np.allclose(got, want, atol=1e-12)
    assert np.allclose(depthwise_conv2d(T(x), ConvParams(T(dw), T(db), 1, 1, True)).data, depthwise_loops(x, dw, db))


def test_separable_parameter_count():
    dw = ConvParams(T(np.zeros((32, 1, 3, 3))), None, 1, 1, True)
    pw = ConvParams(T(np.zeros((64, 32, 1, 1))))
    dense = ConvParams(T(np.zeros((64, 32, 3, 3))), None, 1, 1)
    assert dw.num_params + pw.num_params == 32 * 9 + 32 * 64 == 2336
    assert dense.num_params == 18432


# -- transposed -------------------------------------------------------------


def test_transposed_single_pixel():
    a, b, c, d = 1.5, -2.0, 0.25, 3.0
    v = 2.0
    y = transposed_conv2d(T([[[[v]]]]), ConvParams(T([[[[a, b], [c, d]]]]), None, 2, 0))
    assert y.data[0, 0].tolist() == [[v * a, v * b], [v * c, v * d]]


@pytest.mark.parametrize("seed", range(5))
def test_transposed_matches_scatter(seed):
    r = g64(seed)
    x, w, b = r.standard_normal((2, 3, 3, 4)), r.standard_normal((3, 2, 2, 2)), r.standard_normal(2)
    got = transposed_conv2d(T(x), ConvParams(T(w), T(b), 2, 0)).data
    assert got.shape == (2, 2, 6, 8)
    assert np.allclose(got, transposed_loops(x, w, b), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_transposed_is_adjoint_of_strided_conv(seed):
    r = g64(seed)
    c, o, h, w = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 5))
    k = r.standard_normal((c, o, 2, 2))
    x = r.standard_normal((2, o, 2 * h, 2 * w))
    y = r.standard_normal((2, c, h, w))
    # stride-2 conv from O to C channels uses the same tensor, read as C×O×2×2
    lhs = np.sum(conv2d(T(x), ConvParams(T(k), None, 2, 0)).data * y)
    rhs = np.sum(x * transposed_conv2d(T(y), ConvParams(T(k), None, 2, 0)).data)
    assert abs(lhs - rhs) < 1e-10


@pytest.mark.parametrize("stride,k", [(1, 2), (2, 3)])
def test_transposed_rejects_other_configs(stride, k):
    with pytest.raises((ShapeError, ValueError)):
        transposed_conv2d(T(np.zeros((1, 1, 2, 2))), ConvParams(T(np.zeros((1, 1, k, k))), None, stride, 0))


# -- maxpool ----------------------------------------------------------------


def test_maxpool_single_window():
    assert maxpool2d(T([[[[1, 2], [3, 4]]]])).data.ravel().tolist() == [4]


def test_maxpool_tie_goes_to_first():
    x = T(np.full((1, 2, 4, 4), 3.0), grad=True)
    backward(sum_all(maxpool2d(x)))
    want = np.zeros((4, 4))
    want[0::2, 0::2] = 1
    assert np.array_equal(x.grad[0, 0], want) and np.array_equal(x.grad[0, 1], want)


def test_maxpool_odd_extent():
    with pytest.raises(ShapeError):
        maxpool2d(T(np.zeros((1, 1, 3, 4))))


# -- batchnorm --------------------------------------------------------------


def test_batchnorm_train_normalises(rng):
    x = T(3 + 2 * rng.standard_normal((4, 3, 5, 5)))
    y = batchnorm2d(x, BatchNormState.fresh(3, dtype=np.float64)).data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_running_stats_update(rng):
    x = rng.standard_normal((4, 2, 3, 3)) + 5
    s = BatchNormState.fresh(2, dtype=np.float64)
    batchnorm2d(T(x), s)
    assert np.allclose(s.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(s.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    assert np.all(s.running_var > 0)


def test_batchnorm_eval_identity(rng):
    x = T(rng.standard_normal((2, 2, 3, 3)))
    s = BatchNormState.fresh(2, dtype=np.float64, mode="eval")
    assert np.allclose(batchnorm2d(x, s).data, x.data / math.sqrt(1 + 1e-5), atol=0)
    assert np.allclose(batchnorm2d(x, s).data, x.data, atol=1e-5)


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        batchnorm2d(T(np.zeros((1, 3, 2, 2))), BatchNormState.fresh(2))


# -- bce --------------------------------------------------------------------


def test_bce_at_zero_logits(rng):
    t = (rng.random((2, 1, 4, 4)) < 0.5).astype(float)
    assert float(bce_loss(T(np.zeros((2, 1, 4, 4))), t).data) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_saturated_correct():
    assert float(bce_loss(T(np.full((1, 1, 2, 2), 20.0)), np.ones((1, 1, 2, 2))).data) < 1e-8


def test_bce_matches_naive_formula():
    z = np.linspace(-10, 10, 201).reshape(1, 1, 3, 67)
    for target in (0.0, 1.0):
        t = np.full_like(z, target)
        s = 1 / (1 + np.exp(-z))
        naive = -np.mean(t * np.log(s) + (1 - t) * np.log(1 - s))
        assert abs(float(bce_loss(T(z), t).data) - naive) < 1e-9


def test_bce_gradient_closed_form(rng):
    z = T(rng.standard_normal((2, 1, 3, 3)), grad=True)
    t = (rng.random((2, 1, 3, 3)) < 0.5).astype(float)
    backward(bce_loss(z, t))
    assert np.allclose(z.grad, (1 / (1 + np.exp(-z.data)) - t) / t.size, atol=1e-15)


def test_bce_errors():
    with pytest.raises(ShapeError):
        bce_loss(T(np.zeros((1, 1, 2, 2))), np.zeros((1, 1, 2, 3)))
    with pytest.raises(ValueError):
        bce_loss(T(np.zeros((1, 1, 2, 2))), np.full((1, 1, 2, 2), 0.5))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=4, max_size=4), st.lists(st.booleans(), min_size=4, max_size=4))
def test_bce_non_negative(z, t):
    loss = float(bce_loss(T(np.reshape(z, (1, 1, 2, 2))), np.reshape(t, (1, 1, 2, 2)).astype(float)).data)
    assert loss >= 0
