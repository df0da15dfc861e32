# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels.

Same contract as ``_im2col_py``. col2im adds kernel taps in the same (i, j)
order as the numpy fallback, so both backends agree bit for bit.
"""
import numpy as np
cimport cython
from libc.string cimport memcpy, memset

ctypedef fused floating_t:
    float
    double


cdef inline void _valid_range(Py_ssize_t j, int stride, int pad, Py_ssize_t w, int wo,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    """Output columns ``ow`` in [lo, hi) whose input column ``ow*stride + j - pad`` is inside."""
    cdef Py_ssize_t a = pad - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    hi[0] = (w - 1 + pad - j) // stride + 1 if w - 1 + pad - j >= 0 else 0
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


cdef void _im2col(floating_t[:, :, :, ::1] x, floating_t[:, :, ::1] cols,
                  int k, int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t b, c, i, j, oh, ow, row, lo, hi_w, hi
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef floating_t* dst
    cdef floating_t* src
    for b in range(x.shape[0]):
        for c in range(x.shape[1]):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    _valid_range(j, stride, pad, w, wo, &lo, &hi_w)
                    for oh in range(ho):
                        dst = &cols[b, row, oh * wo]
                        hi = oh * stride + i - pad
                        if hi < 0 or hi >= h:
                            memset(dst, 0, wo * sizeof(floating_t))
                            continue
                        src = &x[b, c, hi, 0]
                        if lo > 0:
                            memset(dst, 0, lo * sizeof(floating_t))
                        if stride == 1:
                            if hi_w > lo:
                                memcpy(dst + lo, src + lo + j - pad, (hi_w - lo) * sizeof(floating_t))
                        else:
                            for ow in range(lo, hi_w):
                                dst[ow] = src[ow * stride + j - pad]
                        if wo > hi_w:
                            memset(dst + hi_w, 0, (wo - hi_w) * sizeof(floating_t))


cdef void _col2im(floating_t[:, :, ::1] cols, floating_t[:, :, :, ::1] out,
                  int k, int stride, int pad, int ho, int wo) noexcept nogil:
    cdef Py_ssize_t b, c, i, j, oh, ow, row, lo, hi_w, hi
    cdef Py_ssize_t h = out.shape[2]
    cdef Py_ssize_t w = out.shape[3]
    cdef floating_t* dst
    cdef floating_t* src
    for b in range(out.shape[0]):
        for c in range(out.shape[1]):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    _valid_range(j, stride, pad, w, wo, &lo, &hi_w)
                    for oh in range(ho):
                        hi = oh * stride + i - pad
                        if hi < 0 or hi >= h:
                            continue
                        src = &cols[b, row, oh * wo]
                        dst = &out[b, c, hi, 0]
                        if stride == 1:
                            dst += j - pad
                            for ow in range(lo, hi_w):
                                dst[ow] += src[ow]
                        else:
                            for ow in range(lo, hi_w):
                                dst[ow * stride + j - pad] += src[ow]


def im2col(x, int k, int stride, int pad):
    x = np.ascontiguousarray(x)
    cdef int b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef int ho = (h + 2 * pad - k) // stride + 1
    cdef int wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((b, c * k * k, ho * wo), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols, k, stride, pad, ho, wo)
    elif x.dtype == np.float64:
        _im2col[double](x, cols, k, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im(cols, shape, int k, int stride, int pad):
    cols = np.ascontiguousarray(cols)
    cdef int b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef int ho = (h + 2 * pad - k) // stride + 1
    cdef int wo = (w + 2 * pad - k) // stride + 1
    cols = cols.reshape(b, c * k * k, ho * wo)
    out = np.zeros((b, c, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, out, k, stride, pad, ho, wo)
    elif cols.dtype == np.float64:
        _col2im[double](cols, out, k, stride, pad, ho, wo)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
