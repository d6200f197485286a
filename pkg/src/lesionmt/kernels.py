"""Hot inner loops for convolution and pooling.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. Both produce bit-identical results (gathers are copies, and the
scatter-adds visit contributions in the same order), so the backend only
changes speed.

The backend is chosen once at import time. Set ``LESIONMT_NUMBA=0`` to force
the numpy path; it is also used automatically if numba cannot be imported.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LESIONMT_NUMBA", "1").strip().lower() not in (
    "0",
    "false",
    "no",
    "off",
)
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def im2col_numpy(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather patches of a padded [n,c,hp,wp] array into [n, c*kh*kw, oh*ow]."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # [n, c, oh, ow, kh, kw] -> [n, c, kh, kw, oh, ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im_numpy(
    cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int, stride: int, oh: int, ow: int
) -> np.ndarray:
    """Scatter-add [n, c*kh*kw, oh*ow] patch gradients back into a padded array."""
    n, c, hp, wp = shape
    out = np.zeros(shape, dtype=np.float64)
    c6 = cols.reshape(n, c, kh, kw, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride] += c6[
                :, :, ki, kj
            ]
    return out


def maxpool2_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool. Returns (values, argmax in 0..3, row-major, first wins)."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    vals = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(vals), idx.astype(np.int8)


def maxpool2_backward_numpy(grad: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, c, ph, pw = grad.shape
    onehot = idx[..., None] == np.arange(4, dtype=np.int8)
    g4 = np.where(onehot, grad[..., None], 0.0)
    return np.ascontiguousarray(
        g4.reshape(n, c, ph, pw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ph, 2 * pw)
    )


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:

    # Output buffers are allocated by numpy and passed in: allocating large
    # arrays inside njit code is markedly slower on first touch.

    @numba.njit(cache=True)
    def _im2col_numba(xp, cols, kh, kw, stride, oh, ow):
        n, c = xp.shape[0], xp.shape[1]
        for b in range(n):
            for ch in range(c):
                src = xp[b, ch]
                for ki in range(kh):
                    for kj in range(kw):
                        dst = cols[b, (ch * kh + ki) * kw + kj]
                        for i in range(oh):
                            y = i * stride + ki
                            for j in range(ow):
                                dst[i * ow + j] = src[y, j * stride + kj]
        return cols

    @numba.njit(cache=True)
    def _col2im_numba(cols, out, kh, kw, stride, oh, ow):
        n, c = out.shape[0], out.shape[1]
        # (ki, kj) outermost so each output element sums in the numpy order
        for ki in range(kh):
            for kj in range(kw):
                for b in range(n):
                    for ch in range(c):
                        src = cols[b, (ch * kh + ki) * kw + kj]
                        dst = out[b, ch]
                        for i in range(oh):
                            y = i * stride + ki
                            for j in range(ow):
                                dst[y, j * stride + kj] += src[i * ow + j]
        return out

    def im2col_numba(xp, kh, kw, stride, oh, ow):
        n, c = xp.shape[:2]
        cols = np.empty((n, c * kh * kw, oh * ow), dtype=np.float64)
        return _im2col_numba(np.ascontiguousarray(xp), cols, kh, kw, stride, oh, ow)

    def col2im_numba(cols, shape, kh, kw, stride, oh, ow):
        out = np.zeros(shape, dtype=np.float64)
        return _col2im_numba(np.ascontiguousarray(cols), out, kh, kw, stride, oh, ow)

    @numba.njit(cache=True)
    def maxpool2_numba(x):
        n, c, h, w = x.shape
        ph, pw = h // 2, w // 2
        vals = np.empty((n, c, ph, pw), dtype=np.float64)
        idx = np.empty((n, c, ph, pw), dtype=np.int8)
        for b in range(n):
            for ch in range(c):
                for i in range(ph):
                    for j in range(pw):
                        best = x[b, ch, 2 * i, 2 * j]
                        arg = 0
                        for k in range(1, 4):
                            v = x[b, ch, 2 * i + k // 2, 2 * j + k % 2]
                            if v > best:
                                best = v
                                arg = k
                        vals[b, ch, i, j] = best
                        idx[b, ch, i, j] = arg
        return vals, idx

    @numba.njit(cache=True)
    def maxpool2_backward_numba(grad, idx):
        n, c, ph, pw = grad.shape
        out = np.zeros((n, c, 2 * ph, 2 * pw), dtype=np.float64)
        for b in range(n):
            for ch in range(c):
                for i in range(ph):
                    for j in range(pw):
                        k = idx[b, ch, i, j]
                        out[b, ch, 2 * i + k // 2, 2 * j + k % 2] = grad[b, ch, i, j]
        return out

else:  # pragma: no cover
    im2col_numba = col2im_numba = maxpool2_numba = maxpool2_backward_numba = None


# im2col is a pure gather that numpy's strided copy already does as fast as
# the compiled loop (see benchmarks/bench_kernels.py), so both backends use it
im2col = im2col_numpy

if USE_NUMBA:
    col2im = col2im_numba

    def maxpool2(x):
        return maxpool2_numba(np.ascontiguousarray(x))

    def maxpool2_backward(grad, idx):
        return maxpool2_backward_numba(np.ascontiguousarray(grad), idx)
else:
    col2im = col2im_numpy
    maxpool2 = maxpool2_numpy
    maxpool2_backward = maxpool2_backward_numpy
