"""Convolution kernels with a numba path and a pure-numpy fallback.

The backend is read once at import from ``MCDALAB_BACKEND`` (``numba`` or
``numpy``). ``numba`` is the default and silently degrades to ``numpy``
when numba cannot be imported. Results agree to rounding, not bitwise, so
a reproducible run must keep one backend throughout.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_requested = os.environ.get("MCDALAB_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"MCDALAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested != "numba":
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def out_size(size: int, ksize: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - ksize) // stride + 1


# numpy ----------------------------------------------------------------------
#
# Both backends share one calling convention:
#   conv2d_forward(x, w, b, stride, pad) -> (out, cols)
#   conv2d_backward(cols, x_shape, w, dout, stride, pad, need_dx) -> (dx | None, dw, db)
# where ``cols`` is the (n*ho*wo, c*kh*kw) patch matrix cached by the forward.

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward_np(x, w, b, stride, pad):
    n = x.shape[0]
    f, _, kh, kw = w.shape
    ho = out_size(x.shape[2], kh, stride, pad)
    wo = out_size(x.shape[3], kw, stride, pad)
    cols = _im2col(_pad(x, pad), kh, kw, stride)
    out = cols @ w.reshape(f, -1).T + b
    return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)), cols


def conv2d_backward_np(cols, x_shape, w, dout, stride, pad, need_dx=True):
    n, c, hgt, wid = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, hgt + 2 * pad, wid + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + hgt, pad:pad + wid] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


# numba ----------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
        n_, c_, hgt, wid = x.shape
        cols = np.zeros((n_ * ho * wo, c_ * kh * kw))
        r = 0
        for n in range(n_):
            for oy in range(ho):
                for ox in range(wo):
                    q = 0
                    for c in range(c_):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= hgt:
                                q += kw
                                continue
                            src = x[n, c, y]
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= xx < wid:
                                    cols[r, q] = src[xx]
                                q += 1
                    r += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, n_, c_, hgt, wid, kh, kw, stride, pad, ho, wo):
        dx = np.zeros((n_, c_, hgt, wid))
        r = 0
        for n in range(n_):
            for oy in range(ho):
                for ox in range(wo):
                    q = 0
                    for c in range(c_):
                        for i in range(kh):
                            y = oy * stride + i - pad
                            if y < 0 or y >= hgt:
                                q += kw
                                continue
                            dst = dx[n, c, y]
                            for j in range(kw):
                                xx = ox * stride + j - pad
                                if 0 <= xx < wid:
                                    dst[xx] += dcols[r, q]
                                q += 1
                    r += 1
        return dx

    def conv2d_forward_nb(x, w, b, stride, pad):
        n = x.shape[0]
        f, _, kh, kw = w.shape
        ho = out_size(x.shape[2], kh, stride, pad)
        wo = out_size(x.shape[3], kw, stride, pad)
        cols = _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad, ho, wo)
        out = cols @ w.reshape(f, -1).T + b
        return np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)), cols

    def conv2d_backward_nb(cols, x_shape, w, dout, stride, pad, need_dx=True):
        n, c, hgt, wid = x_shape
        f, _, kh, kw = w.shape
        ho, wo = dout.shape[2:]
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (dflat.T @ cols).reshape(w.shape)
        db = dflat.sum(axis=0)
        if not need_dx:
            return None, dw, db
        dcols = dflat @ w.reshape(f, -1)
        return _col2im_nb(dcols, n, c, hgt, wid, kh, kw, stride, pad, ho, wo), dw, db

    conv2d_forward = conv2d_forward_nb
    conv2d_backward = conv2d_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward = conv2d_backward_np
