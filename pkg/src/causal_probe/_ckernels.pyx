# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im / max-pool kernels.

Column layout is (C, k, k, B, OH, OW) flattened to (C*k*k, B*OH*OW), the same
layout the numpy fallback produces, so both backends feed identical operands
to the BLAS matmul and accumulate col2im contributions in identical order.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - k) // stride + 1
    out = np.empty((C * k * k, B * OH * OW), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef Py_ssize_t c, ki, kj, b, oh, ow, row, col, ih, iw
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    col = 0
                    for b in range(B):
                        for oh in range(OH):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= H:
                                for ow in range(OW):
                                    cols[row, col] = 0.0
                                    col += 1
                                continue
                            for ow in range(OW):
                                iw = ow * stride + kj - pad
                                if iw < 0 or iw >= W:
                                    cols[row, col] = 0.0
                                else:
                                    cols[row, col] = x[b, c, ih, iw]
                                col += 1
    return out


def col2im(const double[:, ::1] cols, int B, int C, int H, int W, int k, int stride, int pad):
    cdef Py_ssize_t OH = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t c, ki, kj, b, oh, ow, row, col, ih, iw
    with nogil:
        for c in range(C):
            for ki in range(k):
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    col = 0
                    for b in range(B):
                        for oh in range(OH):
                            ih = oh * stride + ki - pad
                            if ih < 0 or ih >= H:
                                col += OW
                                continue
                            for ow in range(OW):
                                iw = ow * stride + kj - pad
                                if iw >= 0 and iw < W:
                                    dx[b, c, ih, iw] += cols[row, col]
                                col += 1
    return out


def maxpool_forward(const double[:, :, :, ::1] x, int k):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t OH = x.shape[2] // k, OW = x.shape[3] // k
    out = np.empty((B, C, OH, OW), dtype=np.float64)
    arg = np.empty((B, C, OH, OW), dtype=np.intp)
    cdef double[:, :, :, ::1] y = out
    cdef Py_ssize_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, oh, ow, i, j, best
    cdef double v, m
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        m = x[b, c, oh * k, ow * k]
                        best = 0
                        for i in range(k):
                            for j in range(k):
                                v = x[b, c, oh * k + i, ow * k + j]
                                if v > m:
                                    m = v
                                    best = i * k + j
                        y[b, c, oh, ow] = m
                        a[b, c, oh, ow] = best
    return out, arg


def maxpool_backward(const double[:, :, :, ::1] gout, const Py_ssize_t[:, :, :, ::1] arg,
                     int H, int W, int k):
    cdef Py_ssize_t B = gout.shape[0], C = gout.shape[1], OH = gout.shape[2], OW = gout.shape[3]
    out = np.zeros((B, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, c, oh, ow, idx
    with nogil:
        for b in range(B):
            for c in range(C):
                for oh in range(OH):
                    for ow in range(OW):
                        idx = arg[b, c, oh, ow]
                        dx[b, c, oh * k + idx // k, ow * k + idx % k] += gout[b, c, oh, ow]
    return out
