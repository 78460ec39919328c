import os
import subprocess
import sys

import numpy as np
import pytest

from covseg import _kernels

NUMPY = _kernels.implementations("numpy")
NUMBA = _kernels.implementations("numba")


def g(seed):
    return np.random.Generator(np.random.PCG64(seed))


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_col2im_agree(seed, stride):
    r = g(seed)
    xp = r.standard_normal((2, 3, 9, 9))
    a, b = NUMPY["im2col"](xp, 3, 3, stride), NUMBA["im2col"](xp, 3, 3, stride)
    assert np.array_equal(a, b)
    cols = r.standard_normal(a.shape)
    assert np.allclose(NUMPY["col2im"](cols, xp.shape, 3, 3, stride), NUMBA["col2im"](cols, xp.shape, 3, 3, stride), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_depthwise_agree(seed):
    r = g(seed)
    xp, w = r.standard_normal((2, 4, 8, 8)), r.standard_normal((4, 3, 3))
    assert np.allclose(NUMPY["depthwise_forward"](xp, w), NUMBA["depthwise_forward"](xp, w), atol=1e-12)
    gout = r.standard_normal((2, 4, 6, 6))
    for a, b in zip(NUMPY["depthwise_backward"](xp, w, gout), NUMBA["depthwise_backward"](xp, w, gout)):
        assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_maxpool_agree_including_ties(seed):
    r = g(seed)
    x = np.round(r.standard_normal((2, 3, 6, 8)), 0)  # many ties
    (ya, ia), (yb, ib) = NUMPY["maxpool_forward"](x), NUMBA["maxpool_forward"](x)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    gout = r.standard_normal(ya.shape)
    assert np.array_equal(NUMPY["maxpool_backward"](gout, ia), NUMBA["maxpool_backward"](gout, ib))


@pytest.mark.parametrize("seed", range(5))
def test_label8_polygon_longest_run_agree(seed):
    r = g(seed)
    m = (r.random((40, 33)) < 0.45).astype(np.uint8)
    (la, ca), (lb, cb) = NUMPY["label8"](m), NUMBA["label8"](m)
    assert ca == cb and np.array_equal(la, lb)
    xs, ys = r.integers(-3, 30, 6).astype(float), r.integers(-3, 30, 6).astype(float)
    assert np.array_equal(NUMPY["polygon_mask"](xs, ys, 28, 26), NUMBA["polygon_mask"](xs, ys, 28, 26))
    f = (r.random(300) < 0.7).astype(np.uint8)
    assert NUMPY["longest_run"](f) == NUMBA["longest_run"](f)


def test_env_flag_selects_numpy():
    code = "from covseg import _kernels; print(_kernels.BACKEND, _kernels.im2col is _kernels.im2col_numpy)"
    env = dict(os.environ, COVSEG_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    assert out.split() == ["numpy", "True"]


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.implementations("cuda")
