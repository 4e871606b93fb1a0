# Compiled kernels: direct-loop convolution and bilinear sampling.
# Same contracts as kernels._pyops; float64, C-contiguous, cross-correlation.

import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (wi + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, k, ho, wo))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t bn, bk, i, j, ci, oy, ox, hi, wj
    cdef double acc
    with nogil:
        for bn in range(n):
            for bk in range(k):
                for oy in range(ho):
                    for ox in range(wo):
                        acc = 0.0
                        for ci in range(c):
                            for i in range(kh):
                                hi = oy * stride + i - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for j in range(kw):
                                    wj = ox * stride + j - pad
                                    if wj < 0 or wj >= wi:
                                        continue
                                    acc += x[bn, ci, hi, wj] * w[bk, ci, i, j]
                        out[bn, bk, oy, ox] = acc
    return out_arr


def conv2d_grad_kernel(double[:, :, :, ::1] grad_y, double[:, :, :, ::1] x,
                       int stride, int pad, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wi = x.shape[3]
    cdef Py_ssize_t k = grad_y.shape[1], ho = grad_y.shape[2], wo = grad_y.shape[3]
    gw_arr = np.zeros((k, c, kh, kw))
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t bn, bk, i, j, ci, oy, ox, hi, wj
    cdef double g
    with nogil:
        for bn in range(n):
            for bk in range(k):
                for oy in range(ho):
                    for ox in range(wo):
                        g = grad_y[bn, bk, oy, ox]
                        for ci in range(c):
                            for i in range(kh):
                                hi = oy * stride + i - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for j in range(kw):
                                    wj = ox * stride + j - pad
                                    if wj < 0 or wj >= wi:
                                        continue
                                    gw[bk, ci, i, j] += g * x[bn, ci, hi, wj]
    return gw_arr


def conv2d_grad_input(double[:, :, :, ::1] grad_y, double[:, :, :, ::1] w,
                      int stride, int pad, int h, int wi):
    cdef Py_ssize_t n = grad_y.shape[0], k = grad_y.shape[1]
    cdef Py_ssize_t ho = grad_y.shape[2], wo = grad_y.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    gx_arr = np.zeros((n, c, h, wi))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t bn, bk, i, j, ci, oy, ox, hi, wj
    cdef double g
    with nogil:
        for bn in range(n):
            for bk in range(k):
                for oy in range(ho):
                    for ox in range(wo):
                        g = grad_y[bn, bk, oy, ox]
                        for ci in range(c):
                            for i in range(kh):
                                hi = oy * stride + i - pad
                                if hi < 0 or hi >= h:
                                    continue
                                for j in range(kw):
                                    wj = ox * stride + j - pad
                                    if wj < 0 or wj >= wi:
                                        continue
                                    gx[bn, ci, hi, wj] += g * w[bk, ci, i, j]
    return gx_arr


def bilinear_forward(double[:, :, ::1] img, double[:, :, ::1] grid):
    cdef Py_ssize_t c = img.shape[0], h = img.shape[1], w = img.shape[2]
    cdef Py_ssize_t ho = grid.shape[0], wo = grid.shape[1]
    out_arr = np.zeros((c, ho, wo))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t ci, oy, ox
    cdef double gx, gy, wx, wy, acc
    cdef Py_ssize_t x0, y0, x1, y1
    with nogil:
        for oy in range(ho):
            for ox in range(wo):
                gx = (grid[oy, ox, 0] + 1.0) * (w - 1) / 2.0
                gy = (grid[oy, ox, 1] + 1.0) * (h - 1) / 2.0
                x0 = <Py_ssize_t>floor(gx)
                y0 = <Py_ssize_t>floor(gy)
                x1 = x0 + 1
                y1 = y0 + 1
                wx = gx - x0
                wy = gy - y0
                for ci in range(c):
                    acc = 0.0
                    if 0 <= y0 < h and 0 <= x0 < w:
                        acc += img[ci, y0, x0] * ((1.0 - wy) * (1.0 - wx))
                    if 0 <= y0 < h and 0 <= x1 < w:
                        acc += img[ci, y0, x1] * ((1.0 - wy) * wx)
                    if 0 <= y1 < h and 0 <= x0 < w:
                        acc += img[ci, y1, x0] * (wy * (1.0 - wx))
                    if 0 <= y1 < h and 0 <= x1 < w:
                        acc += img[ci, y1, x1] * (wy * wx)
                    out[ci, oy, ox] = acc
    return out_arr


def bilinear_grad_input(double[:, :, ::1] grid, double[:, :, ::1] grad_out, int h, int w):
    cdef Py_ssize_t c = grad_out.shape[0]
    cdef Py_ssize_t ho = grid.shape[0], wo = grid.shape[1]
    gimg_arr = np.zeros((c, h, w))
    cdef double[:, :, ::1] gimg = gimg_arr
    cdef Py_ssize_t ci, oy, ox
    cdef double gx, gy, wx, wy, g
    cdef Py_ssize_t x0, y0, x1, y1
    with nogil:
        for oy in range(ho):
            for ox in range(wo):
                gx = (grid[oy, ox, 0] + 1.0) * (w - 1) / 2.0
                gy = (grid[oy, ox, 1] + 1.0) * (h - 1) / 2.0
                x0 = <Py_ssize_t>floor(gx)
                y0 = <Py_ssize_t>floor(gy)
                x1 = x0 + 1
                y1 = y0 + 1
                wx = gx - x0
                wy = gy - y0
                for ci in range(c):
                    g = grad_out[ci, oy, ox]
                    if 0 <= y0 < h and 0 <= x0 < w:
                        gimg[ci, y0, x0] += g * ((1.0 - wy) * (1.0 - wx))
                    if 0 <= y0 < h and 0 <= x1 < w:
                        gimg[ci, y0, x1] += g * ((1.0 - wy) * wx)
                    if 0 <= y1 < h and 0 <= x0 < w:
                        gimg[ci, y1, x0] += g * (wy * (1.0 - wx))
                    if 0 <= y1 < h and 0 <= x1 < w:
                        gimg[ci, y1, x1] += g * (wy * wx)
    return gimg_arr
