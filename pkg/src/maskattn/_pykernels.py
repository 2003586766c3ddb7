"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
The accumulation order of ``col2im`` matches the compiled version so the two
backends agree bitwise on data-movement kernels.
"""
import numpy as np
from scipy.special import erf

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_rows(s):
    """Softmax over the last axis with per-row max subtraction."""
    s = np.ascontiguousarray(s, dtype=np.float64)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    with np.errstate(over="ignore"):  # x*x = inf for |x| > 1e154; the density is then 0
        return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def im2col(x, kh, kw, stride, pad):
    """NHWC patches -> array of shape (B, Ho, Wo, kh*kw*C), (ky, kx, c) minor order."""
    b, h, w, c = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    xp[:, pad:pad + h, pad:pad + w, :] = x
    cols = np.empty((b, ho, wo, kh, kw, c))
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky, kx, :] = xp[
                :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :
            ]
    return cols.reshape(b, ho, wo, kh * kw * c)


def col2im(cols, x_shape, kh, kw, stride, pad):
    b, h, w, c = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, ho, wo, kh, kw, c)
    xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for ky in range(kh):
        for kx in range(kw):
            xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += cols[
                :, :, :, ky, kx, :
            ]
    return np.ascontiguousarray(xp[:, pad:pad + h, pad:pad + w, :])
