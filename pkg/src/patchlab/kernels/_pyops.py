"""Vectorized numpy kernels: im2col convolution and bilinear sampling.

Pure-numpy twin of the compiled `_fastops` extension. All arrays are
C-contiguous float64; convolution is cross-correlation (no kernel flip).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _cols(x, kh, kw, stride, pad):
    """Return (padded input, column matrix [N*Ho*Wo, C*kh*kw], Ho, Wo)."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return xp, np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x, w, stride, pad):
    n, c, h, wi = x.shape
    k, _, kh, kw = w.shape
    _, cols, ho, wo = _cols(x, kh, kw, stride, pad)
    wmat = w.reshape(k, c * kh * kw)
    y = cols @ wmat.T
    return np.ascontiguousarray(y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))


def conv2d_grad_kernel(grad_y, x, stride, pad, kh, kw):
    n, k, ho, wo = grad_y.shape
    c = x.shape[1]
    _, cols, _, _ = _cols(x, kh, kw, stride, pad)
    gy = grad_y.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    return np.ascontiguousarray((gy.T @ cols).reshape(k, c, kh, kw))


def conv2d_grad_input(grad_y, w, stride, pad, h, wi):
    n, k, ho, wo = grad_y.shape
    _, c, kh, kw = w.shape
    gy = grad_y.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
    cg = gy @ w.reshape(k, c * kh * kw)
    cg = cg.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros((n, c, h + 2 * pad, wi + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            # fixed (i, j) hits disjoint strided cells, so += is safe
            gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += cg[:, :, i, j]
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wi])


def _corners(grid, h, w):
    gx = (grid[..., 0] + 1.0) * (w - 1) / 2.0
    gy = (grid[..., 1] + 1.0) * (h - 1) / 2.0
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    wx = gx - x0
    wy = gy - y0
    return x0, y0, wx, wy


def bilinear_forward(img, grid):
    c, h, w = img.shape
    x0, y0, wx, wy = _corners(grid, h, w)
    out = np.zeros((c,) + grid.shape[:-1])
    # corner order and accumulation order mirror the compiled kernel
    for dy, dx, wgt in (
        (0, 0, (1.0 - wy) * (1.0 - wx)),
        (0, 1, (1.0 - wy) * wx),
        (1, 0, wy * (1.0 - wx)),
        (1, 1, wy * wx),
    ):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        ys = np.clip(yc, 0, h - 1)
        xs = np.clip(xc, 0, w - 1)
        out += img[:, ys, xs] * (wgt * valid)
    return out


def bilinear_grad_input(grid, grad_out, h, w):
    c = grad_out.shape[0]
    x0, y0, wx, wy = _corners(grid, h, w)
    gimg = np.zeros((c, h, w))
    flat = gimg.reshape(c, h * w)
    for dy, dx, wgt in (
        (0, 0, (1.0 - wy) * (1.0 - wx)),
        (0, 1, (1.0 - wy) * wx),
        (1, 0, wy * (1.0 - wx)),
        (1, 1, wy * wx),
    ):
        yc = y0 + dy
        xc = x0 + dx
        valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
        idx = (yc * w + xc)[valid]
        for ch in range(c):
            np.add.at(flat[ch], idx, (grad_out[ch] * wgt)[valid])
    return gimg
