# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Mirrors ``deepgmm._pykernels`` function for function."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


def log_gauss_table(x, means, var):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] M = np.ascontiguousarray(means, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(var, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], m = X.shape[1], kk = M.shape[0]
    cdef Py_ssize_t i, k, j
    cdef double[:, ::1] inv = np.empty((kk, m))
    cdef double[::1] const = np.empty(kk)
    cdef double acc, d
    out_arr = np.empty((n, kk))
    cdef double[:, ::1] out = out_arr
    for k in range(kk):
        acc = 0.0
        for j in range(m):
            acc += log(V[k, j])
            inv[k, j] = 1.0 / V[k, j]
        const[k] = -0.5 * m * LOG_2PI - 0.5 * acc
    with nogil:
        for i in range(n):
            for k in range(kk):
                acc = 0.0
                for j in range(m):
                    d = X[i, j] - M[k, j]
                    acc += d * d * inv[k, j]
                out[i, k] = const[k] - 0.5 * acc
    return out_arr


def im2col(x, int k, int pad):
    cdef const double[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = X.shape[0], c = X.shape[1], h = X.shape[2], w = X.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t bi, y, xx, ci, ky, kx, row, col, sy, sx
    cols_arr = np.empty((b * ho * wo, c * k * k))
    cdef double[:, ::1] cols = cols_arr
    with nogil:
        for bi in range(b):
            for y in range(ho):
                for xx in range(wo):
                    row = (bi * ho + y) * wo + xx
                    col = 0
                    for ci in range(c):
                        for ky in range(k):
                            sy = y + ky - pad
                            for kx in range(k):
                                sx = xx + kx - pad
                                if 0 <= sy < h and 0 <= sx < w:
                                    cols[row, col] = X[bi, ci, sy, sx]
                                else:
                                    cols[row, col] = 0.0
                                col += 1
    return cols_arr


def col2im(cols, shape, int k, int pad):
    cdef const double[:, ::1] C = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t bi, y, xx, ci, ky, kx, row, col, sy, sx
    out_arr = np.zeros((b, c, h, w))
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for bi in range(b):
            for y in range(ho):
                for xx in range(wo):
                    row = (bi * ho + y) * wo + xx
                    col = 0
                    for ci in range(c):
                        for ky in range(k):
                            sy = y + ky - pad
                            for kx in range(k):
                                sx = xx + kx - pad
                                if 0 <= sy < h and 0 <= sx < w:
                                    out[bi, ci, sy, sx] += C[row, col]
                                col += 1
    return out_arr


def maxpool2_forward(x):
    cdef const double[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = X.shape[0], c = X.shape[1]
    cdef Py_ssize_t ho = X.shape[2] // 2, wo = X.shape[3] // 2
    cdef Py_ssize_t bi, ci, y, xx
    cdef double best, v
    cdef signed char arg, q
    out_arr = np.empty((b, c, ho, wo))
    idx_arr = np.empty((b, c, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = X[bi, ci, 2 * y, 2 * xx]
                        arg = 0
                        for q in range(1, 4):
                            v = X[bi, ci, 2 * y + q // 2, 2 * xx + q % 2]
                            if v > best:
                                best = v
                                arg = q
                        out[bi, ci, y, xx] = best
                        idx[bi, ci, y, xx] = arg
    return out_arr, idx_arr


def maxpool2_backward(dout, idx):
    cdef const double[:, :, :, ::1] D = np.ascontiguousarray(dout, dtype=np.float64)
    cdef const signed char[:, :, :, ::1] I = np.ascontiguousarray(idx, dtype=np.int8)
    cdef Py_ssize_t b = D.shape[0], c = D.shape[1], ho = D.shape[2], wo = D.shape[3]
    cdef Py_ssize_t bi, ci, y, xx
    cdef signed char q
    out_arr = np.zeros((b, c, 2 * ho, 2 * wo))
    cdef double[:, :, :, ::1] out = out_arr
    with nogil:
        for bi in range(b):
            for ci in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        q = I[bi, ci, y, xx]
                        out[bi, ci, 2 * y + q // 2, 2 * xx + q % 2] = D[bi, ci, y, xx]
    return out_arr
