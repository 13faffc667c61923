# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the numpy kernels in ``_reference``; same signatures and results."""

import numpy as np

ctypedef fused real:
    float
    double


cdef inline (Py_ssize_t, Py_ssize_t) _pads(Py_ssize_t size, Py_ssize_t k, Py_ssize_t s, Py_ssize_t out):
    cdef Py_ssize_t lo = k // 2
    cdef Py_ssize_t hi = (out - 1) * s + k - size - lo
    return lo, (hi if hi > 0 else 0)


def _im2col(real[:, :, :, ::1] x, real[:, :, :, ::1] cols, Py_ssize_t kh, Py_ssize_t kw,
            Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = cols.shape[1], Wo = cols.shape[2]
    cdef Py_ssize_t top, left, b, ho, wo, c, i, j, r, q, k
    top = _pads(H, kh, sh, Ho)[0]
    left = _pads(W, kw, sw, Wo)[0]
    with nogil:
        for b in range(B):
            for ho in range(Ho):
                for wo in range(Wo):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            r = ho * sh + i - top
                            for j in range(kw):
                                q = wo * sw + j - left
                                if 0 <= r < H and 0 <= q < W:
                                    cols[b, ho, wo, k] = x[b, c, r, q]
                                else:
                                    cols[b, ho, wo, k] = 0
                                k = k + 1


def im2col(x, kh, kw, sh, sw, Ho, Wo):
    x = np.ascontiguousarray(x)
    B, C = x.shape[:2]
    cols = np.empty((B, Ho, Wo, C * kh * kw), dtype=x.dtype)
    _im2col(x, cols, kh, kw, sh, sw)
    return cols


def _col2im(real[:, :, :, ::1] g, real[:, :, :, ::1] gx, Py_ssize_t kh, Py_ssize_t kw,
            Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t B = gx.shape[0], C = gx.shape[1], H = gx.shape[2], W = gx.shape[3]
    cdef Py_ssize_t Ho = g.shape[1], Wo = g.shape[2]
    cdef Py_ssize_t top, left, b, ho, wo, c, i, j, r, q, k
    top = _pads(H, kh, sh, Ho)[0]
    left = _pads(W, kw, sw, Wo)[0]
    with nogil:
        for b in range(B):
            for ho in range(Ho):
                for wo in range(Wo):
                    k = 0
                    for c in range(C):
                        for i in range(kh):
                            r = ho * sh + i - top
                            for j in range(kw):
                                q = wo * sw + j - left
                                if 0 <= r < H and 0 <= q < W:
                                    gx[b, c, r, q] += g[b, ho, wo, k]
                                k = k + 1


def col2im(gcols, C, H, W, kh, kw, sh, sw):
    gcols = np.ascontiguousarray(gcols)
    gx = np.zeros((gcols.shape[0], C, H, W), dtype=gcols.dtype)
    _col2im(gcols, gx, kh, kw, sh, sw)
    return gx


def _dw_forward(real[:, :, ::1] x, real[:, ::1] w, real[:, :, ::1] out):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], C = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t p = K // 2, b, t, c, j, s
    cdef real acc
    with nogil:
        for b in range(B):
            for t in range(T):
                for c in range(C):
                    acc = 0
                    for j in range(K):
                        s = t + j - p
                        if 0 <= s < T:
                            acc = acc + x[b, s, c] * w[c, j]
                    out[b, t, c] = acc


def depthwise_conv1d_forward(x, w):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    out = np.empty_like(x)
    _dw_forward(x, w, out)
    return out


def _dw_backward(real[:, :, ::1] g, real[:, :, ::1] x, real[:, ::1] w,
                 real[:, :, ::1] gx, double[:, ::1] gw):
    cdef Py_ssize_t B = x.shape[0], T = x.shape[1], C = x.shape[2], K = w.shape[1]
    cdef Py_ssize_t p = K // 2, b, t, c, j, s
    with nogil:
        for b in range(B):
            for t in range(T):
                for c in range(C):
                    for j in range(K):
                        s = t + j - p
                        if 0 <= s < T:
                            gx[b, s, c] += g[b, t, c] * w[c, j]
                            gw[c, j] += g[b, t, c] * x[b, s, c]


def depthwise_conv1d_backward(g, x, w):
    x = np.ascontiguousarray(x)
    g = np.ascontiguousarray(g, dtype=x.dtype)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    gx = np.zeros_like(x)
    gw = np.zeros(w.shape, dtype=np.float64)
    _dw_backward(g, x, w, gx, gw)
    return gx, gw.astype(w.dtype)


def _scatter(real[:, ::1] src, long long[::1] index, real[:, ::1] out):
    cdef Py_ssize_t n = src.shape[0], d = src.shape[1], i, j, r
    with nogil:
        for i in range(n):
            r = index[i]
            for j in range(d):
                out[r, j] += src[i, j]


def scatter_add_rows(src, index, n_rows):
    src = np.ascontiguousarray(src)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n_rows):
        raise IndexError(f"row index out of range for {n_rows} rows")
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    _scatter(src, index, out)
    return out
