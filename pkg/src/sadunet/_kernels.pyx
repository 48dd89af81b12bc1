# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im and 2x2 max-pool kernels.

Loop orders mirror ``_kernels_py`` so both backends give identical bits.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, ::1] x, int kh, int kw, int pt, int pb, int pl, int pr):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Ho = H + pt + pb - kh + 1, Wo = W + pl + pr - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C * kh * kw, Ho * Wo), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, h, w, row, sh, sw, w0, w1
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    # valid output columns for this kernel tap
                    w0 = pl - j
                    if w0 < 0:
                        w0 = 0
                    w1 = W + pl - j
                    if w1 > Wo:
                        w1 = Wo
                    for h in range(Ho):
                        sh = h + i - pt
                        if sh < 0 or sh >= H:
                            continue
                        for w in range(w0, w1):
                            sw = w + j - pl
                            out[row, h * Wo + w] = x[c, sh, sw]
    return out_arr


def col2im(floating[:, ::1] cols, int C, int H, int W, int kh, int kw,
           int pt, int pb, int pl, int pr):
    cdef Py_ssize_t Ho = H + pt + pb - kh + 1, Wo = W + pl + pr - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, h, w, row, sh, sw, w0, w1
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    w0 = pl - j
                    if w0 < 0:
                        w0 = 0
                    w1 = W + pl - j
                    if w1 > Wo:
                        w1 = Wo
                    for h in range(Ho):
                        sh = h + i - pt
                        if sh < 0 or sh >= H:
                            continue
                        for w in range(w0, w1):
                            sw = w + j - pl
                            out[c, sh, sw] += cols[row, h * Wo + w]
    return out_arr


def maxpool2x2_forward(floating[:, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], Ho = x.shape[1] // 2, Wo = x.shape[2] // 2
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((C, Ho, Wo), dtype=dtype)
    arg_arr = np.empty((C, Ho, Wo), dtype=np.int8)
    cdef floating[:, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, ::1] arg = arg_arr
    cdef Py_ssize_t c, h, w
    cdef floating best, v
    cdef cnp.int8_t k
    with nogil:
        for c in range(C):
            for h in range(Ho):
                for w in range(Wo):
                    best = x[c, 2 * h, 2 * w]
                    k = 0
                    v = x[c, 2 * h, 2 * w + 1]
                    if v > best:
                        best = v
                        k = 1
                    v = x[c, 2 * h + 1, 2 * w]
                    if v > best:
                        best = v
                        k = 2
                    v = x[c, 2 * h + 1, 2 * w + 1]
                    if v > best:
                        best = v
                        k = 3
                    out[c, h, w] = best
                    arg[c, h, w] = k
    return out_arr, arg_arr


def maxpool2x2_backward(floating[:, :, ::1] g, cnp.int8_t[:, :, ::1] arg, int H, int W):
    cdef Py_ssize_t C = g.shape[0], Ho = g.shape[1], Wo = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, h, w
    cdef int k
    with nogil:
        for c in range(C):
            for h in range(Ho):
                for w in range(Wo):
                    k = arg[c, h, w]
                    out[c, 2 * h + (k >> 1), 2 * w + (k & 1)] = g[c, h, w]
    return out_arr
