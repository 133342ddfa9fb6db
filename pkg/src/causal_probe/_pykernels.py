"""Numpy implementations of the conv/pool kernels.

Used when the compiled extension is unavailable. Results are bitwise identical
to ``_ckernels``: same column layout, same per-element accumulation order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, OH, OW, k, k) -> (C, k, k, B, OH, OW)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * k * k, -1)


def col2im(cols, B, C, H, W, k, stride, pad):
    OH = (H + 2 * pad - k) // stride + 1
    OW = (W + 2 * pad - k) // stride + 1
    cols = cols.reshape(C, k, k, B, OH, OW)
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * OH:stride, kj:kj + stride * OW:stride] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])


def maxpool_forward(x, k):
    B, C, H, W = x.shape
    OH, OW = H // k, W // k
    win = x[:, :, :OH * k, :OW * k].reshape(B, C, OH, k, OW, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, OH, OW, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.intp)


def maxpool_backward(gout, arg, H, W, k):
    B, C, OH, OW = gout.shape
    onehot = np.zeros((B, C, OH, OW, k * k))
    np.put_along_axis(onehot, arg[..., None], gout[..., None], axis=-1)
    dx = np.zeros((B, C, H, W))
    dx[:, :, :OH * k, :OW * k] = (
        onehot.reshape(B, C, OH, OW, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH * k, OW * k)
    )
    return dx
