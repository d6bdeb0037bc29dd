"""Pure-numpy kernel backend: im2col convolutions, windowed pooling.

All functions take and return NCHW float arrays and never mutate their
inputs. Max pooling breaks ties on the first maximum in row-major window
order; the numba backend matches that so the two are interchangeable.
"""

import numpy as np


def _out_size(size, ksize, stride, pad):
    return (size + 2 * pad - ksize) // stride + 1


def _im2col(x, kh, kw, stride, pad, pad_value=0.0):
    """Gather sliding windows into (N, C, KH, KW, OH, OW)."""
    n, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (oh - 1) + 1:stride,
                                  j:j + stride * (ow - 1) + 1:stride]
    return cols


def conv2d_forward(x, w, stride, pad):
    n = x.shape[0]
    f, c, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    oh, ow = cols.shape[4], cols.shape[5]
    flat = cols.reshape(n, c * kh * kw, oh * ow)
    out = np.tensordot(w.reshape(f, -1), flat, axes=([1], [1]))
    return np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(n, f, oh, ow)


def conv2d_backward_dx(dout, w, x_shape, stride, pad):
    n, c, h, w_in = x_shape
    f, _, kh, kw = w.shape
    oh, ow = dout.shape[2], dout.shape[3]
    d2 = dout.reshape(n, f, oh * ow)
    # (N, C*KH*KW, OH*OW)
    dcols = np.tensordot(w.reshape(f, -1), d2, axes=([0], [1])).transpose(1, 0, 2)
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros((n, c, h + 2 * pad, w_in + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
                j:j + stride * (ow - 1) + 1:stride] += dcols[:, :, i, j]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w_in])
    return dxp


def conv2d_backward_dw(dout, x, w_shape, stride, pad):
    f, c, kh, kw = w_shape
    n = x.shape[0]
    oh, ow = dout.shape[2], dout.shape[3]
    cols = _im2col(x, kh, kw, stride, pad).reshape(n, c * kh * kw, oh * ow)
    d2 = dout.reshape(n, f, oh * ow)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2]))
    return dw.reshape(f, c, kh, kw)


def maxpool2d_forward(x, ksize, stride, pad):
    """Returns (out, switches); switches holds the flat kh*ksize+kw argmax."""
    n, c, h, w = x.shape
    neg = np.array(-np.inf, dtype=x.dtype)
    cols = _im2col(x, ksize, ksize, stride, pad, pad_value=neg)
    oh, ow = cols.shape[4], cols.shape[5]
    flat = cols.reshape(n, c, ksize * ksize, oh, ow)
    switches = flat.argmax(axis=2).astype(np.int32)
    out = np.take_along_axis(flat, switches[:, :, None], axis=2)[:, :, 0]
    return out, switches


def maxpool2d_backward(dout, switches, x_shape, ksize, stride, pad):
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    for k in range(ksize * ksize):
        mask = switches == k
        if not mask.any():
            continue
        i, j = divmod(k, ksize)
        dxp[:, :, i:i + stride * (oh - 1) + 1:stride,
            j:j + stride * (ow - 1) + 1:stride] += np.where(mask, dout, 0)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp
