"""Hot inner loops, each with a numba-compiled and a pure-numpy implementation.

The active backend is chosen once at import time. Set ``COVSEG_DISABLE_NUMBA=1``
to force the numpy path (numba is also skipped when it cannot be imported).
Both implementations of every kernel are importable directly so the test suite
and the benchmark can compare them regardless of the active backend.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("COVSEG_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# im2col / col2im (stride-s sliding windows over an already padded input)
# ---------------------------------------------------------------------------


def im2col_numpy(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, ho * wo)


@_njit
def _im2col_loops(xp, kh, kw, stride):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            cols[b, row, base + x] = xp[b, ch, yy, x * stride + j]
    return cols


def im2col_numba(xp, kh, kw, stride):
    return _im2col_loops(np.ascontiguousarray(xp), kh, kw, stride)


def col2im_numpy(cols, shape, kh, kw, stride):
    n, c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


@_njit
def _col2im_loops(cols, n, c, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(ho):
                        yy = y * stride + i
                        base = y * wo
                        for x in range(wo):
                            out[b, ch, yy, x * stride + j] += cols[b, row, base + x]
    return out


def col2im_numba(cols, shape, kh, kw, stride):
    n, c, hp, wp = shape
    return _col2im_loops(np.ascontiguousarray(cols), n, c, hp, wp, kh, kw, stride)


# ---------------------------------------------------------------------------
# depthwise convolution (one kh x kw kernel per channel, stride 1)
# ---------------------------------------------------------------------------


def depthwise_forward_numpy(xp, w):
    n, c, hp, wp = xp.shape
    _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + ho, j : j + wo] * w[None, :, i, j, None, None]
    return out


@_njit
def _depthwise_forward_loops(xp, w):
    n, c, hp, wp = xp.shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = hp - kh + 1, wp - kw + 1
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    for y in range(ho):
                        for x in range(wo):
                            out[b, ch, y, x] += wv * xp[b, ch, y + i, x + j]
    return out


def depthwise_forward_numba(xp, w):
    return _depthwise_forward_loops(np.ascontiguousarray(xp), np.ascontiguousarray(w))


def depthwise_backward_numpy(xp, w, gout):
    n, c, ho, wo = gout.shape
    _, kh, kw = w.shape
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + ho, j : j + wo] += gout * w[None, :, i, j, None, None]
            gw[:, i, j] = (gout * xp[:, :, i : i + ho, j : j + wo]).sum(axis=(0, 2, 3))
    return gxp, gw


@_njit
def _depthwise_backward_loops(xp, w, gout):
    n, c, ho, wo = gout.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    wv = w[ch, i, j]
                    acc = 0.0
                    for y in range(ho):
                        for x in range(wo):
                            g = gout[b, ch, y, x]
                            gxp[b, ch, y + i, x + j] += g * wv
                            acc += g * xp[b, ch, y + i, x + j]
                    gw[ch, i, j] += acc
    return gxp, gw


def depthwise_backward_numba(xp, w, gout):
    return _depthwise_backward_loops(
        np.ascontiguousarray(xp), np.ascontiguousarray(w), np.ascontiguousarray(gout)
    )


# ---------------------------------------------------------------------------
# 2x2 / stride-2 max pooling; argmax is the first maximum in row-major order
# ---------------------------------------------------------------------------


def maxpool_forward_numpy(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


@_njit
def _maxpool_forward_loops(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int8)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    best = x[b, ch, 2 * y, 2 * xx]
                    k = 0
                    for q in range(1, 4):
                        v = x[b, ch, 2 * y + q // 2, 2 * xx + q % 2]
                        if v > best:
                            best = v
                            k = q
                    out[b, ch, y, xx] = best
                    idx[b, ch, y, xx] = k
    return out, idx


def maxpool_forward_numba(x):
    return _maxpool_forward_loops(np.ascontiguousarray(x))


def maxpool_backward_numpy(gout, idx):
    n, c, ho, wo = gout.shape
    g = np.zeros((n, c, ho, wo, 4), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None].astype(np.intp), gout[..., None], axis=-1)
    return g.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)


@_njit
def _maxpool_backward_loops(gout, idx):
    n, c, ho, wo = gout.shape
    gx = np.zeros((n, c, 2 * ho, 2 * wo), dtype=gout.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    k = idx[b, ch, y, xx]
                    gx[b, ch, 2 * y + k // 2, 2 * xx + k % 2] = gout[b, ch, y, xx]
    return gx


def maxpool_backward_numba(gout, idx):
    return _maxpool_backward_loops(np.ascontiguousarray(gout), np.ascontiguousarray(idx))


# ---------------------------------------------------------------------------
# 8-connected component labeling (two-pass union-find)
# ---------------------------------------------------------------------------


def _label8(mask):
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = np.zeros(h * w // 2 + 2, dtype=np.int64)
    nxt = 1
    for y in range(h):
        for x in range(w):
            if mask[y, x] == 0:
                continue
            cur = 0
            # already-visited neighbours: W, NW, N, NE
            for k in range(4):
                yy = y if k == 0 else y - 1
                xx = x - 1 if k < 2 else (x if k == 2 else x + 1)
                if yy < 0 or xx < 0 or xx >= w:
                    continue
                root = labels[yy, xx]
                if root == 0:
                    continue
                while parent[root] != root:
                    root = parent[root]
                if cur == 0:
                    cur = root
                elif root != cur:
                    if root < cur:
                        parent[cur] = root
                        cur = root
                    else:
                        parent[root] = cur
            if cur == 0:
                if nxt >= parent.shape[0]:
                    grown = np.zeros(parent.shape[0] * 2, dtype=np.int64)
                    grown[: parent.shape[0]] = parent
                    parent = grown
                parent[nxt] = nxt
                cur = nxt
                nxt += 1
            labels[y, x] = cur
    # resolve to roots, then renumber 1..k in row-major discovery order
    remap = np.zeros(nxt, dtype=np.int64)
    count = 0
    for y in range(h):
        for x in range(w):
            root = labels[y, x]
            if root == 0:
                continue
            while parent[root] != root:
                root = parent[root]
            if remap[root] == 0:
                count += 1
                remap[root] = count
            labels[y, x] = remap[root]
    return labels, count


def label8_numpy(mask):
    return _label8(np.asarray(mask, dtype=np.uint8))


_label8_jit = _njit(_label8)


def label8_numba(mask):
    return _label8_jit(np.ascontiguousarray(mask, dtype=np.uint8))


# ---------------------------------------------------------------------------
# even-odd polygon fill at integer pixel centres, boundary inclusive
# ---------------------------------------------------------------------------


def polygon_mask_numpy(xs, ys, h, w):
    px = np.arange(w, dtype=np.float64)[None, :, None]
    py = np.arange(h, dtype=np.float64)[:, None, None]
    x1 = np.asarray(xs, dtype=np.float64)
    y1 = np.asarray(ys, dtype=np.float64)
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    x1, y1, x2, y2 = (a[None, None, :] for a in (x1, y1, x2, y2))
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    within = (
        (px >= np.minimum(x1, x2)) & (px <= np.maximum(x1, x2)) & (py >= np.minimum(y1, y2)) & (py <= np.maximum(y1, y2))
    )
    on_edge = ((cross == 0) & within).any(axis=-1)
    straddle = (y1 > py) != (y2 > py)
    # crossing lies strictly right of the point; sign of cross flips with edge direction
    right = np.where(y2 > y1, cross > 0, cross < 0)
    inside = ((straddle & right).sum(axis=-1) % 2) == 1
    return (inside | on_edge).astype(np.uint8)


@_njit
def _polygon_mask_loops(xs, ys, h, w):
    out = np.zeros((h, w), dtype=np.uint8)
    m = xs.shape[0]
    for py in range(h):
        for px in range(w):
            crossings = 0
            edge = False
            for k in range(m):
                x1 = xs[k]
                y1 = ys[k]
                x2 = xs[(k + 1) % m]
                y2 = ys[(k + 1) % m]
                cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
                if (
                    cross == 0
                    and min(x1, x2) <= px <= max(x1, x2)
                    and min(y1, y2) <= py <= max(y1, y2)
                ):
                    edge = True
                    break
                if (y1 > py) != (y2 > py):
                    if (y2 > y1 and cross > 0) or (y2 < y1 and cross < 0):
                        crossings += 1
            if edge or crossings % 2 == 1:
                out[py, px] = 1
    return out


def polygon_mask_numba(xs, ys, h, w):
    return _polygon_mask_loops(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64), h, w)


# ---------------------------------------------------------------------------
# longest run of consecutive true flags
# ---------------------------------------------------------------------------


def longest_run_numpy(flags):
    f = np.asarray(flags, dtype=np.int8)
    if f.size == 0:
        return 0
    edges = np.diff(np.concatenate(([0], f, [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    if starts.size == 0:
        return 0
    return int((stops - starts).max())


@_njit
def _longest_run_loops(flags):
    best = 0
    cur = 0
    for i in range(flags.shape[0]):
        if flags[i]:
            cur += 1
            if cur > best:
                best = cur
        else:
            cur = 0
    return best


def longest_run_numba(flags):
    return int(_longest_run_loops(np.asarray(flags, dtype=np.uint8)))


_NUMPY = {
    "im2col": im2col_numpy,
    "col2im": col2im_numpy,
    "depthwise_forward": depthwise_forward_numpy,
    "depthwise_backward": depthwise_backward_numpy,
    "maxpool_forward": maxpool_forward_numpy,
    "maxpool_backward": maxpool_backward_numpy,
    "label8": label8_numpy,
    "polygon_mask": polygon_mask_numpy,
    "longest_run": longest_run_numpy,
}
_NUMBA = {
    "im2col": im2col_numba,
    "col2im": col2im_numba,
    "depthwise_forward": depthwise_forward_numba,
    "depthwise_backward": depthwise_backward_numba,
    "maxpool_forward": maxpool_forward_numba,
    "maxpool_backward": maxpool_backward_numba,
    "label8": label8_numba,
    "polygon_mask": polygon_mask_numba,
    "longest_run": longest_run_numba,
}
KERNEL_NAMES = tuple(_NUMPY)


def implementations(backend):
    """Return the kernel table for ``"numba"`` or ``"numpy"``."""
    if backend == "numba":
        return dict(_NUMBA)
    if backend == "numpy":
        return dict(_NUMPY)
    raise ValueError(f"unknown backend {backend!r}")


BACKEND = "numba" if USE_NUMBA else "numpy"
_active = _NUMBA if USE_NUMBA else _NUMPY

im2col = _active["im2col"]
col2im = _active["col2im"]
depthwise_forward = _active["depthwise_forward"]
depthwise_backward = _active["depthwise_backward"]
maxpool_forward = _active["maxpool_forward"]
maxpool_backward = _active["maxpool_backward"]
label8 = _active["label8"]
polygon_mask = _active["polygon_mask"]
longest_run = _active["longest_run"]
