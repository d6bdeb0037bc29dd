"""Numba @njit kernel backend.

Direct convolution/pooling loops compiled per dtype. The jitted bodies fill
caller-allocated output buffers so one implementation serves float32 and
float64; the thin wrappers below allocate and keep the public signatures
identical to numpy_backend. Serial on purpose: results must be bitwise
reproducible run to run, and the accumulation order is fixed. The loops are
ordered so the innermost one walks output width contiguously with all bounds
hoisted, which is what lets LLVM vectorize them; each output element still
collects its terms in (channel, row, col) order.
"""

import numpy as np
from numba import njit

# reduction lane count for the weight gradient; the summation order of the
# lanes is fixed, so results stay reproducible
_LANES = 8


def _out_size(size, ksize, stride, pad):
    return (size + 2 * pad - ksize) // stride + 1


@njit(cache=True, inline="always")
def _col_range(kj, stride, pad, wd, ow):
    # output columns oj for which the input column oj*stride - pad + kj
    # lands inside [0, wd)
    lo = -((kj - pad) // stride)
    if lo < 0:
        lo = 0
    hi = -(-(wd + pad - kj) // stride)
    if hi > ow:
        hi = ow
    return lo, hi


@njit(cache=True)
def _conv2d_forward(x, w, stride, pad, out):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    for ni in range(n):
        for fi in range(f):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[fi, ci, ki, kj]
                        lo, hi = _col_range(kj, stride, pad, wd, ow)
                        base = kj - pad
                        for oi in range(oh):
                            i = oi * stride - pad + ki
                            if i < 0 or i >= h:
                                continue
                            for oj in range(lo, hi):
                                out[ni, fi, oi, oj] += \
                                    wv * x[ni, ci, i, base + oj * stride]


@njit(cache=True)
def _conv2d_backward_dx(dout, w, stride, pad, dx):
    n, c, h, wd = dx.shape
    f, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    for ni in range(n):
        for fi in range(f):
            for ci in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        wv = w[fi, ci, ki, kj]
                        lo, hi = _col_range(kj, stride, pad, wd, ow)
                        base = kj - pad
                        for oi in range(oh):
                            i = oi * stride - pad + ki
                            if i < 0 or i >= h:
                                continue
                            for oj in range(lo, hi):
                                dx[ni, ci, i, base + oj * stride] += \
                                    wv * dout[ni, fi, oi, oj]


@njit(cache=True)
def _conv2d_backward_dw(dout, x, stride, pad, dw, buf):
    n, c, h, wd = x.shape
    f, _, kh, kw = dw.shape
    oh, ow = dout.shape[2], dout.shape[3]
    for fi in range(f):
        for ci in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    lo, hi = _col_range(kj, stride, pad, wd, ow)
                    base = kj - pad
                    for l in range(_LANES):
                        buf[l] = 0
                    for ni in range(n):
                        for oi in range(oh):
                            i = oi * stride - pad + ki
                            if i < 0 or i >= h:
                                continue
                            oj = lo
                            while oj + _LANES <= hi:
                                for l in range(_LANES):
                                    buf[l] += dout[ni, fi, oi, oj + l] * \
                                        x[ni, ci, i, base + (oj + l) * stride]
                                oj += _LANES
                            l = 0
                            for tail in range(oj, hi):
                                buf[l] += dout[ni, fi, oi, tail] * \
                                    x[ni, ci, i, base + tail * stride]
                                l += 1
                    acc = buf[0]
                    for l in range(1, _LANES):
                        acc += buf[l]
                    dw[fi, ci, ki, kj] = acc


@njit(cache=True)
def _maxpool2d_forward(x, ksize, stride, pad, out, switches):
    n, c, h, w = x.shape
    oh, ow = out.shape[2], out.shape[3]
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                i0 = oi * stride - pad
                for oj in range(ow):
                    j0 = oj * stride - pad
                    best = x[ni, ci, 0, 0]
                    best_k = -1
                    for ki in range(ksize):
                        i = i0 + ki
                        if i < 0 or i >= h:
                            continue
                        for kj in range(ksize):
                            j = j0 + kj
                            if j < 0 or j >= w:
                                continue
                            v = x[ni, ci, i, j]
                            # first maximum in row-major window order wins
                            if best_k < 0 or v > best:
                                best = v
                                best_k = ki * ksize + kj
                    out[ni, ci, oi, oj] = best
                    switches[ni, ci, oi, oj] = best_k


@njit(cache=True)
def _maxpool2d_backward(dout, switches, ksize, stride, pad, dx):
    n, c, h, w = dx.shape
    oh, ow = dout.shape[2], dout.shape[3]
    for ni in range(n):
        for ci in range(c):
            for oi in range(oh):
                for oj in range(ow):
                    k = switches[ni, ci, oi, oj]
                    i = oi * stride - pad + k // ksize
                    j = oj * stride - pad + k % ksize
                    dx[ni, ci, i, j] += dout[ni, ci, oi, oj]


def conv2d_forward(x, w, stride, pad):
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    out = np.zeros((n, f, _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)),
                   dtype=x.dtype)
    _conv2d_forward(x, w, stride, pad, out)
    return out


def conv2d_backward_dx(dout, w, x_shape, stride, pad):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    _conv2d_backward_dx(dout, w, stride, pad, dx)
    return dx


def conv2d_backward_dw(dout, x, w_shape, stride, pad):
    dw = np.zeros(w_shape, dtype=dout.dtype)
    buf = np.zeros(_LANES, dtype=dout.dtype)
    _conv2d_backward_dw(dout, x, stride, pad, dw, buf)
    return dw


def maxpool2d_forward(x, ksize, stride, pad):
    n, c, h, w = x.shape
    oh = _out_size(h, ksize, stride, pad)
    ow = _out_size(w, ksize, stride, pad)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    switches = np.empty((n, c, oh, ow), dtype=np.int32)
    _maxpool2d_forward(x, ksize, stride, pad, out, switches)
    return out, switches


def maxpool2d_backward(dout, switches, x_shape, ksize, stride, pad):
    dx = np.zeros(x_shape, dtype=dout.dtype)
    _maxpool2d_backward(dout, switches, ksize, stride, pad, dx)
    return dx
