"""Pure-numpy kernels.  Always available; the compiled module mirrors these."""

import numpy as np


def _pads(size, k, s, out):
    lo = k // 2
    hi = max(0, (out - 1) * s + k - size - lo)
    return lo, hi


def im2col(x, kh, kw, sh, sw, Ho, Wo):
    B, C, H, W = x.shape
    top, bottom = _pads(H, kh, sh, Ho)
    left, right = _pads(W, kw, sw, Wo)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    cols = np.empty((B, Ho, Wo, C, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(B, Ho, Wo, C * kh * kw)


def col2im(gcols, C, H, W, kh, kw, sh, sw):
    B, Ho, Wo, _ = gcols.shape
    top, bottom = _pads(H, kh, sh, Ho)
    left, right = _pads(W, kw, sw, Wo)
    g = gcols.reshape(B, Ho, Wo, C, kh, kw)
    gxp = np.zeros((B, C, H + top + bottom, W + left + right), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += \
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gxp[:, :, top:top + H, left:left + W].copy()


def depthwise_conv1d_forward(x, w):
    B, T, C = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((B, T + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + T] = x
    out = np.zeros_like(x)
    for j in range(k):
        out += xp[:, j:j + T] * w[:, j]
    return out


def depthwise_conv1d_backward(g, x, w):
    B, T, C = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.zeros((B, T + 2 * p, C), dtype=x.dtype)
    xp[:, p:p + T] = x
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        gxp[:, j:j + T] += g * w[:, j]
        gw[:, j] = (g * xp[:, j:j + T]).sum(axis=(0, 1))
    return gxp[:, p:p + T].copy(), gw


def scatter_add_rows(src, index, n_rows):
    out = np.zeros((n_rows, src.shape[1]), dtype=src.dtype)
    np.add.at(out, index, src)
    return out
