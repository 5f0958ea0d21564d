# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution/pooling kernels.

Loop order is chosen so every accumulation happens in the same sequence as
the numpy fallback; the two backends agree bitwise.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    out_arr = np.empty((n * ho * wo, c * k * k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oh, ow, ki, kj, row, col
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = (b * ho + oh) * wo + ow
                    col = 0
                    for ch in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                out[row, col] = x[b, ch, oh * stride + ki, ow * stride + kj]
                                col += 1
    return out_arr


def col2im(const double[:, ::1] cols, tuple x_shape, int k, int stride):
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    dx_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, oh, ow, ki, kj, row, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for ki in range(k):
                    for kj in range(k):
                        col = (ch * k + ki) * k + kj
                        for oh in range(ho):
                            for ow in range(wo):
                                row = (b * ho + oh) * wo + ow
                                dx[b, ch, oh * stride + ki, ow * stride + kj] += cols[row, col]
    return dx_arr


def maxpool_forward(const double[:, :, :, ::1] x, int window):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // window, wo = x.shape[3] // window
    out_arr = np.empty((n, c, ho, wo), dtype=np.float64)
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t b, ch, oh, ow, i, j, best_i
    cdef double best, v
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        best = x[b, ch, oh * window, ow * window]
                        best_i = 0
                        for i in range(window):
                            for j in range(window):
                                v = x[b, ch, oh * window + i, ow * window + j]
                                if v > best:
                                    best = v
                                    best_i = i * window + j
                        out[b, ch, oh, ow] = best
                        idx[b, ch, oh, ow] = best_i
    return out_arr, idx_arr


def maxpool_backward(const double[:, :, :, ::1] grad, const cnp.int64_t[:, :, :, ::1] idx,
                     tuple x_shape, int window):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, oh, ow, p
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oh in range(ho):
                    for ow in range(wo):
                        p = idx[b, ch, oh, ow]
                        dx[b, ch, oh * window + p // window, ow * window + p % window] = grad[b, ch, oh, ow]
    return dx_arr
