"""Convolutional building blocks and the pixelwise BCE loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import ShapeError, Tensor, _record, _sigmoid_array


@dataclass
class ConvParams:
    """Weights of one convolution.

    Dense: ``weight`` is out×in×kh×kw. Depthwise (``depthwise=True``): C×1×kh×kw,
    one kernel per channel. Transposed: in×out×kh×kw, the layout of the strided
    convolution it is the adjoint of.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    depthwise: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def num_params(self) -> int:
        n = self.weight.size
        return n + (self.bias.size if self.bias is not None else 0)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


def _out_extent(size: int, k: int, pad: int, stride: int, axis: str) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv2d: non-integral or empty output {axis} for size {size}, kernel {k}, pad {pad}, stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation plus bias (dense or depthwise)."""
    if p.depthwise:
        return depthwise_conv2d(x, p)
    w, b = p.weight, p.bias
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    s, pad = p.stride, p.padding
    ho = _out_extent(h, kh, pad, s, "height")
    wo = _out_extent(wd, kw, pad, s, "width")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _kernels.im2col(xp, kh, kw, s)  # n × (c·kh·kw) × (ho·wo)
    wm = w.data.reshape(o, -1)
    out = np.matmul(wm, cols)
    if b is not None:
        out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)
    xp_shape = xp.shape

    def bw(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.einsum("nok,nck->oc", g2, cols, optimize=True).reshape(w.shape).astype(w.dtype)
        gcols = np.matmul(wm.T, g2)
        gxp = _kernels.col2im(gcols, xp_shape, kh, kw, s)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g2.sum(axis=(0, 2)) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) + ((b,) if b is not None else ())
    return _record("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    w, b = p.weight, p.bias
    n, c, h, wd = x.shape
    if w.shape[0] != c or w.shape[1] != 1:
        raise ShapeError(f"depthwise conv: weight {w.shape} does not match {c} input channels")
    if p.stride != 1:
        raise ShapeError("depthwise conv supports stride 1 only")
    kh, kw = w.shape[2], w.shape[3]
    pad = p.padding
    _out_extent(h, kh, pad, 1, "height")
    _out_extent(wd, kw, pad, 1, "width")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    k = w.data.reshape(c, kh, kw)
    out = _kernels.depthwise_forward(xp, k)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gxp, gk = _kernels.depthwise_backward(xp, k, np.ascontiguousarray(g))
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return gx, gk.reshape(w.shape), gb

    inputs = (x, w) + ((b,) if b is not None else ())
    return _record("depthwise_conv2d", out, inputs, bw)


def separable_conv2d(x: Tensor, depthwise: ConvParams, pointwise: ConvParams) -> Tensor:
    """Per-channel spatial convolution followed by a 1×1 channel mix."""
    if not depthwise.depthwise:
        raise ValueError("first stage of a separable conv must be depthwise")
    if pointwise.weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise stage must be 1×1, got {pointwise.weight.shape[2:]}")
    return conv2d(depthwise_conv2d(x, depthwise), pointwise)


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """2×2 stride-2 transposed convolution; doubles H and W."""
    w, b = p.weight, p.bias
    if p.stride != 2 or w.shape[2:] != (2, 2) or p.padding != 0:
        raise ShapeError(
            f"transposed_conv2d supports kernel 2×2, stride 2, pad 0 only (got kernel {w.shape[2:]}, "
            f"stride {p.stride}, pad {p.padding})"
        )
    n, c, h, wd = x.shape
    if w.shape[0] != c:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, weight expects {w.shape[0]}")
    o = w.shape[1]
    # out[n, o, 2y+i, 2x+j] = sum_c x[n, c, y, x] · w[c, o, i, j]
    t = np.tensordot(x.data, w.data, axes=([1], [0]))  # n, h, w, o, 2, 2
    out = np.ascontiguousarray(t.transpose(0, 3, 1, 4, 2, 5)).reshape(n, o, 2 * h, 2 * wd)
    if b is not None:
        out += b.data[None, :, None, None]
    xd, wdat = x.data, w.data

    def bw(g):
        g6 = g.reshape(n, o, h, 2, wd, 2)
        gx = np.tensordot(g6, wdat, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 2, 4]))  # c, o, 2, 2
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return np.ascontiguousarray(gx), gw, gb

    inputs = (x, w) + ((b,) if b is not None else ())
    return _record("transposed_conv2d", out, inputs, bw)


def maxpool2d(x: Tensor) -> Tensor:
    """2×2 window, stride 2. Gradient goes to the first maximum in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even extents, got {h}×{w}")
    out, idx = _kernels.maxpool_forward(x.data)
    return _record("maxpool2d", out, (x,), lambda g: (_kernels.maxpool_backward(np.ascontiguousarray(g), idx),))


def batchnorm2d(x: Tensor, s: BatchNormState) -> Tensor:
    n, c, h, w = x.shape
    if s.gamma.shape != (c,):
        raise ShapeError(f"batchnorm2d: state has {s.gamma.shape[0]} channels, input has {c}")
    gamma = s.gamma.data.reshape(1, c, 1, 1)
    beta = s.beta.data.reshape(1, c, 1, 1)
    if s.mode == "eval":
        inv = 1.0 / np.sqrt(s.running_var.reshape(1, c, 1, 1) + s.eps)
        xhat = (x.data - s.running_mean.reshape(1, c, 1, 1)) * inv
        out = (xhat * gamma + beta).astype(x.dtype)

        def bw_eval(g):
            return g * gamma * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _record("batchnorm2d_eval", out, (x, s.gamma, s.beta), bw_eval)
    if s.mode != "train":
        raise ValueError(f"unknown batchnorm mode {s.mode!r}")
    m = n * h * w
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))  # biased
    inv = (1.0 / np.sqrt(var + s.eps)).astype(x.dtype).reshape(1, c, 1, 1)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv
    out = xhat * gamma + beta
    mom = s.momentum
    s.running_mean = ((1 - mom) * s.running_mean + mom * mean).astype(s.running_mean.dtype)
    s.running_var = ((1 - mom) * s.running_var + mom * var).astype(s.running_var.dtype)

    def bw(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * gamma
        gx = inv / m * (
            m * gxhat - gxhat.sum(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record("batchnorm2d", out, (x, s.gamma, s.beta), bw)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_loss: target shape {t.shape} ≠ logits shape {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target must be binary {0, 1}")
    z = logits.data
    t = t.astype(z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    loss = np.asarray(per.mean(dtype=np.float64), dtype=z.dtype)
    return _record("bce", loss, (logits,), lambda g: ((_sigmoid_array(z) - t) * (g / count),))
