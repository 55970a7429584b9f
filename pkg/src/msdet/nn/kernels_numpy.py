"""Pure-numpy reference kernels.

Semantics (scan order, tie breaking, accumulation dtype) are the contract;
the numba backend implements the same signatures with explicit loops.
Convolution is cross-correlation (no kernel flip).  Argmax ties resolve to
the first element in row-major scan order.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _im2col(xp, k, stride):
    """(n, c, hp, wp) padded input -> (n, c*k*k, ho*wo) patch matrix."""
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return win.reshape(n, c * k * k, ho * wo), ho, wo


def conv2d_forward(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols, ho, wo = _im2col(xp, k, stride)
    y = np.matmul(w.reshape(co, -1), cols)
    y += b.reshape(1, co, 1)
    return y.reshape(n, co, ho, wo)


def conv2d_backward(x, w, stride, pad, gy):
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    hp, wp = xp.shape[2], xp.shape[3]
    cols, ho, wo = _im2col(xp, k, stride)
    g2 = gy.reshape(n, co, ho * wo)

    gb = gy.sum(axis=(0, 2, 3))
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)

    gcols = np.matmul(w.reshape(co, -1).T, g2)  # (n, ci*k*k, ho*wo)
    gcols = gcols.reshape(n, ci, k, k, ho, wo)
    gxp = np.zeros((n, ci, hp, wp), dtype=gy.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += (
                gcols[:, :, ky, kx]
            )
    if pad:
        gx = gxp[:, :, pad:pad + h, pad:pad + wd].copy()
    else:
        gx = gxp
    return gx, gw, gb


def maxpool2_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xt = x[:, :, :ho * 2, :wo * 2]
    win = xt.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    am = win.argmax(axis=-1)  # first max in (ky, kx) scan order
    y = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    arg = (oy * 2 + am // 2) * w + (ox * 2 + am % 2)
    return y, arg.astype(np.int64)


def maxpool2_backward(arg, gy, h, w):
    n, c, ho, wo = gy.shape
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    plane = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None])
    np.add.at(gx.reshape(-1), (plane * (h * w) + arg).ravel(), gy.ravel())
    return gx.reshape(n, c, h, w)


def roi_max_pool_forward(feat, regions, out_h, out_w):
    """feat (c, h, w); regions int64 (R, 4) inclusive cell bounds [x1, y1, x2, y2]."""
    c, H, W = feat.shape
    R = regions.shape[0]
    y = np.empty((R, c, out_h, out_w), dtype=feat.dtype)
    arg = np.empty((R, c, out_h, out_w), dtype=np.int64)
    for r in range(R):
        x1, y1, x2, y2 = regions[r]
        rh = y2 - y1 + 1
        rw = x2 - x1 + 1
        for i in range(out_h):
            hs = y1 + (i * rh) // out_h
            he = y1 + ((i + 1) * rh + out_h - 1) // out_h
            for j in range(out_w):
                ws = x1 + (j * rw) // out_w
                we = x1 + ((j + 1) * rw + out_w - 1) // out_w
                win = feat[:, hs:he, ws:we].reshape(c, -1)
                am = win.argmax(axis=1)
                y[r, :, i, j] = win[np.arange(c), am]
                arg[r, :, i, j] = (hs + am // (we - ws)) * W + (ws + am % (we - ws))
    return y, arg


def roi_max_pool_backward(arg, gy, c, h, w):
    gf = np.zeros(c * h * w, dtype=gy.dtype)
    off = np.arange(c)[None, :, None, None] * (h * w)
    np.add.at(gf, (arg + off).ravel(), gy.ravel())
    return gf.reshape(c, h, w)
