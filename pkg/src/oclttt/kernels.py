"""2-D convolution kernels (NCHW, float64).

Two interchangeable implementations: a sliding-window/tensordot path in plain
numpy and an im2col/col2im path whose loops are compiled with numba. ``conv2d_forward`` and friends dispatch
to numba unless it is missing or disabled through ``OCLTTT_DISABLE_NUMBA``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import HAVE_NUMBA, njit


def output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


# -- numpy path -------------------------------------------------------------

def _patches(xp, kh, kw, stride):
    # (N, Ci, Ho, Wo, kh, kw) view
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward_numpy(x, w, b, stride, pad):
    kh, kw = w.shape[2:]
    cols = _patches(_pad(x, pad), kh, kw, stride)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Co
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_input_numpy(dy, w, x_shape, stride, pad):
    n, ci, h, wd = x_shape
    kh, kw = w.shape[2:]
    ho, wo = dy.shape[2:]
    dxp = np.zeros((n, ci, h + 2 * pad, wd + 2 * pad))
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))  # N, Ho, Wo, Ci
            dxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += contrib.transpose(0, 3, 1, 2)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv2d_backward_weight_numpy(dy, x, w_shape, stride, pad):
    kh, kw = w_shape[2:]
    cols = _patches(_pad(x, pad), kh, kw, stride)
    return np.ascontiguousarray(np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3])))


# -- compiled path (numba when available) ----------------------------------
#
# im2col/col2im are explicit loops so numba compiles them; the contraction
# itself is a BLAS matmul in both paths.

@njit
def _im2col(xp, kh, kw, stride, ho, wo):
    n, ci = xp.shape[0], xp.shape[1]
    cols = np.empty((n * ho * wo, ci * kh * kw))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                r = (b * ho + i) * wo + j
                q = 0
                for c in range(ci):
                    for ki in range(kh):
                        row = i * stride + ki
                        for kj in range(kw):
                            cols[r, q] = xp[b, c, row, j * stride + kj]
                            q += 1
    return cols


@njit
def _col2im(dcols, n, ci, hp, wp, kh, kw, stride, ho, wo):
    dxp = np.zeros((n, ci, hp, wp))
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                r = (b * ho + i) * wo + j
                q = 0
                for c in range(ci):
                    for ki in range(kh):
                        row = i * stride + ki
                        for kj in range(kw):
                            dxp[b, c, row, j * stride + kj] += dcols[r, q]
                            q += 1
    return dxp


def _dy_matrix(dy):
    n, co, ho, wo = dy.shape
    return np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * ho * wo, co)


def conv2d_forward_loops(x, w, b, stride, pad):
    co, ci, kh, kw = w.shape
    n = x.shape[0]
    ho = output_size(x.shape[2], kh, stride, pad)
    wo = output_size(x.shape[3], kw, stride, pad)
    cols = _im2col(np.ascontiguousarray(_pad(x, pad)), kh, kw, stride, ho, wo)
    out = cols @ w.reshape(co, -1).T
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_backward_input_loops(dy, w, x_shape, stride, pad):
    co, ci, kh, kw = w.shape
    n, _, ho, wo = dy.shape
    dcols = _dy_matrix(dy) @ w.reshape(co, -1)
    dxp = _col2im(dcols, n, ci, x_shape[2] + 2 * pad, x_shape[3] + 2 * pad, kh, kw, stride, ho, wo)
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp)


def conv2d_backward_weight_loops(dy, x, w_shape, stride, pad):
    co, ci, kh, kw = w_shape
    ho, wo = dy.shape[2:]
    cols = _im2col(np.ascontiguousarray(_pad(x, pad)), kh, kw, stride, ho, wo)
    return np.ascontiguousarray((_dy_matrix(dy).T @ cols).reshape(w_shape))


def conv2d_naive(x, w, b, stride, pad):
    """Quadruple-loop reference, interpreted Python. Test oracle only."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad(x, pad)
    ho, wo = output_size(h, kh, stride, pad), output_size(wd, kw, stride, pad)
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, o, i, j] = np.sum(patch * w[o]) + (0.0 if b is None else b[o])
    return out


if HAVE_NUMBA:
    conv2d_forward = conv2d_forward_loops
    conv2d_backward_input = conv2d_backward_input_loops
    conv2d_backward_weight = conv2d_backward_weight_loops
else:
    conv2d_forward = conv2d_forward_numpy
    conv2d_backward_input = conv2d_backward_input_numpy
    conv2d_backward_weight = conv2d_backward_weight_numpy
