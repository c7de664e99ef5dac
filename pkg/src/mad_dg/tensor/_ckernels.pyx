# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dilated-convolution kernels.

Inner loops run over a contiguous channel axis. Per-element accumulation
order still matches ``_pykernels`` exactly for the forward pass
(channel, row tap, column tap) and the input gradient (output channel,
row tap, column tap); the weight gradient sums over (batch, row, column)
sequentially.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] xp, w_arr, int stride, int dilation, int ho, int wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t O = w_arr.shape[0], KH = w_arr.shape[2], KW = w_arr.shape[3]
    # [C, KH, KW, O] so the output-channel loop is unit stride
    cdef double[:, :, :, ::1] wt = np.ascontiguousarray(np.transpose(w_arr, (1, 2, 3, 0)))
    out_arr = np.empty((B, ho, wo, O), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, o, c, i, j, y, x, row, col
    cdef double v
    cdef double* acc
    cdef const double* wrow
    with nogil:
        for b in range(B):
            for y in range(ho):
                for x in range(wo):
                    acc = &out[b, y, x, 0]
                    for o in range(O):
                        acc[o] = 0.0
                    for c in range(C):
                        for i in range(KH):
                            row = y * stride + i * dilation
                            for j in range(KW):
                                col = x * stride + j * dilation
                                v = xp[b, c, row, col]
                                wrow = &wt[c, i, j, 0]
                                for o in range(O):
                                    acc[o] = acc[o] + wrow[o] * v
    return np.ascontiguousarray(out_arr.transpose(0, 3, 1, 2))


def conv2d_backward_input(g_arr, w_arr, int stride, int dilation, int hp, int wp):
    cdef Py_ssize_t B = g_arr.shape[0], O = g_arr.shape[1], ho = g_arr.shape[2], wo = g_arr.shape[3]
    cdef Py_ssize_t C = w_arr.shape[1], KH = w_arr.shape[2], KW = w_arr.shape[3]
    cdef const double[:, :, :, ::1] g = np.ascontiguousarray(g_arr)
    cdef double[:, :, :, ::1] wt = np.ascontiguousarray(np.transpose(w_arr, (0, 2, 3, 1)))
    gx_arr = np.zeros((B, hp, wp, C), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t b, o, c, i, j, y, x, row, col
    cdef double gv
    cdef double* dst
    cdef const double* wrow
    with nogil:
        for b in range(B):
            for o in range(O):
                for i in range(KH):
                    for j in range(KW):
                        wrow = &wt[o, i, j, 0]
                        for y in range(ho):
                            row = y * stride + i * dilation
                            for x in range(wo):
                                col = x * stride + j * dilation
                                gv = g[b, o, y, x]
                                dst = &gx[b, row, col, 0]
                                for c in range(C):
                                    dst[c] = dst[c] + wrow[c] * gv
    return np.ascontiguousarray(gx_arr.transpose(0, 3, 1, 2))


def conv2d_backward_weight(g_arr, xp_arr, int stride, int dilation, int kh, int kw):
    cdef Py_ssize_t B = g_arr.shape[0], O = g_arr.shape[1], ho = g_arr.shape[2], wo = g_arr.shape[3]
    cdef Py_ssize_t C = xp_arr.shape[1]
    if C < O:
        return _backward_weight_wide_out(g_arr, xp_arr, stride, dilation, kh, kw)
    cdef const double[:, :, :, ::1] g = np.ascontiguousarray(g_arr)
    cdef double[:, :, :, ::1] xt = np.ascontiguousarray(np.transpose(xp_arr, (0, 2, 3, 1)))
    gw_arr = np.zeros((O, kh, kw, C), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, i, j, y, x, row, col
    cdef double gv
    cdef double* acc
    cdef const double* src
    with nogil:
        for o in range(O):
            for i in range(kh):
                for j in range(kw):
                    acc = &gw[o, i, j, 0]
                    for b in range(B):
                        for y in range(ho):
                            row = y * stride + i * dilation
                            for x in range(wo):
                                col = x * stride + j * dilation
                                gv = g[b, o, y, x]
                                src = &xt[b, row, col, 0]
                                for c in range(C):
                                    acc[c] = acc[c] + gv * src[c]
    return np.ascontiguousarray(gw_arr.transpose(0, 3, 1, 2))


def _backward_weight_wide_out(g_arr, const double[:, :, :, ::1] xp, int stride, int dilation, int kh, int kw):
    # same per-element order as conv2d_backward_weight, vectorized over output channels
    cdef Py_ssize_t B = g_arr.shape[0], O = g_arr.shape[1], ho = g_arr.shape[2], wo = g_arr.shape[3]
    cdef Py_ssize_t C = xp.shape[1]
    cdef double[:, :, :, ::1] gt = np.ascontiguousarray(np.transpose(g_arr, (0, 2, 3, 1)))
    gw_arr = np.zeros((C, kh, kw, O), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, o, c, i, j, y, x, row, col
    cdef double xv
    cdef double* acc
    cdef const double* src
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    acc = &gw[c, i, j, 0]
                    for b in range(B):
                        for y in range(ho):
                            row = y * stride + i * dilation
                            for x in range(wo):
                                col = x * stride + j * dilation
                                xv = xp[b, c, row, col]
                                src = &gt[b, y, x, 0]
                                for o in range(O):
                                    acc[o] = acc[o] + src[o] * xv
    return np.ascontiguousarray(gw_arr.transpose(3, 0, 1, 2))
