# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, erf

cnp.import_array()

cdef double SQRT_HALF = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def softmax_rows(s):
    cdef cnp.ndarray arr = np.ascontiguousarray(s, dtype=np.float64)
    cdef Py_ssize_t ncol = arr.shape[arr.ndim - 1]
    cdef Py_ssize_t nrow = arr.size // ncol if ncol else 0
    out = np.empty_like(arr)
    cdef double[:, ::1] src = arr.reshape(nrow, ncol)
    cdef double[:, ::1] dst = out.reshape(nrow, ncol)
    cdef Py_ssize_t i, j
    cdef double mx, tot, e
    for i in range(nrow):
        mx = src[i, 0]
        for j in range(1, ncol):
            if src[i, j] > mx:
                mx = src[i, j]
        tot = 0.0
        for j in range(ncol):
            e = exp(src[i, j] - mx)
            dst[i, j] = e
            tot += e
        for j in range(ncol):
            dst[i, j] = dst[i, j] / tot
    return out


def softmax_rows_backward(y, g):
    cdef cnp.ndarray ya = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray ga = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t ncol = ya.shape[ya.ndim - 1]
    cdef Py_ssize_t nrow = ya.size // ncol if ncol else 0
    out = np.empty_like(ya)
    cdef double[:, ::1] yv = ya.reshape(nrow, ncol)
    cdef double[:, ::1] gv = ga.reshape(nrow, ncol)
    cdef double[:, ::1] dv = out.reshape(nrow, ncol)
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(nrow):
        dot = 0.0
        for j in range(ncol):
            dot += gv[i, j] * yv[i, j]
        for j in range(ncol):
            dv[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out


def gelu(x):
    cdef cnp.ndarray arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i
    cdef double v
    for i in range(src.shape[0]):
        v = src[i]
        dst[i] = 0.5 * v * (1.0 + erf(v * SQRT_HALF))
    return out


def gelu_grad(x):
    cdef cnp.ndarray arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i
    cdef double v
    for i in range(src.shape[0]):
        v = src[i]
        dst[i] = 0.5 * (1.0 + erf(v * SQRT_HALF)) + v * INV_SQRT_2PI * exp(-0.5 * v * v)
    return out


def im2col(x, int kh, int kw, int stride, int pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], h = xv.shape[1], w = xv.shape[2], c = xv.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, ho, wo, kh * kw * c))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, oy, ox, ky, kx, ch, iy, ix, base
    for n in range(b):
        for oy in range(ho):
            for ox in range(wo):
                for ky in range(kh):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for kx in range(kw):
                        ix = ox * stride + kx - pad
                        if ix < 0 or ix >= w:
                            continue
                        base = (ky * kw + kx) * c
                        for ch in range(c):
                            ov[n, oy, ox, base + ch] = xv[n, iy, ix, ch]
    return out


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef double[:, :, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        b, ho, wo, kh * kw * c)
    out = np.zeros((b, h, w, c))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, oy, ox, ky, kx, ch, iy, ix, base
    # (ky, kx) outermost: same summation order as the numpy twin
    for ky in range(kh):
        for kx in range(kw):
            base = (ky * kw + kx) * c
            for n in range(b):
                for oy in range(ho):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(wo):
                        ix = ox * stride + kx - pad
                        if ix < 0 or ix >= w:
                            continue
                        for ch in range(c):
                            ov[n, iy, ix, ch] += cv[n, oy, ox, base + ch]
    return out
