"""Numeric building blocks with explicit forward/backward passes.

Tensors are ``(C, H, W)`` arrays for a single image. Every ``*_backward``
takes the upstream gradient of the matching forward output and returns the
input gradient, plus parameter gradients where the op has parameters. The
dtype of the inputs is preserved, so float64 inputs give float64 gradients
for finite-difference checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._validation import DomainError


def _im2col(x, k, pad):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (C, H', W', k, k)
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, Ho * Wo)
    return cols, Ho, Wo


def _col2im(dcols, shape, k, pad, Ho, Wo):
    C, H, W = shape
    dx = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(C, k, k, Ho, Wo)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + Ho, j : j + Wo] += d[:, i, j]
    if pad:
        dx = dx[:, pad:-pad, pad:-pad]
    return dx


def conv2d_forward(x, w, b, pad=None):
    """Stride-1 cross-correlation. ``w`` is ``(Cout, Cin, k, k)``; default
    padding keeps the spatial size for odd ``k``."""
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DomainError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise DomainError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} filters")
    k = w.shape[2]
    pad = k // 2 if pad is None else pad
    cols, Ho, Wo = _im2col(x, k, pad)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(w.shape[0], Ho, Wo), (x.shape, cols, w, pad)


def conv2d_backward(dout, cache):
    xshape, cols, w, pad = cache
    Cout, k = w.shape[0], w.shape[2]
    g = dout.reshape(Cout, -1)
    dw = (g @ cols.T).reshape(w.shape)
    db = g.sum(axis=1)
    dcols = w.reshape(Cout, -1).T @ g
    dx = _col2im(dcols, xshape, k, pad, dout.shape[1], dout.shape[2])
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    # subgradient 0 at the kink
    return dout * (x > 0)


def maxpool2(x):
    """2x2 max pooling with stride 2; ties route to the first element in
    row-major window order."""
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise DomainError(f"maxpool2 needs even spatial size, got {H}x{W}")
    win = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    C, H, W = shape
    d = np.zeros((C, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    return d.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(shape)


def fc_forward(x, w, b):
    """``x`` is ``(n, fan_in)``; ``w`` is ``(fan_out, fan_in)``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DomainError(f"fc shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w.T + b, x


def fc_backward(dout, x, w):
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(dout, s):
    return dout * s * (1.0 - s)


def _roi_sample_coords(rois, P, H, W):
    """Bilinear sample locations for each RoI, in feature-cell coordinates.

    ``rois`` is ``(n, 4)`` as ``(x0, y0, x1, y1)`` in feature coordinates
    (cell centers at integers). Samples sit at the centers of a ``P x P``
    grid of bins and are clamped to the map.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    x0, y0, x1, y1 = rois.T
    if np.any(x1 < -0.5) or np.any(y1 < -0.5) or np.any(x0 > W - 0.5) or np.any(y0 > H - 0.5) or np.any(x1 <= x0) or np.any(y1 <= y0):
        raise DomainError("RoI does not intersect the feature map")
    frac = (np.arange(P) + 0.5) / P
    xs = x0[:, None] + (x1 - x0)[:, None] * frac  # (n, P)
    ys = y0[:, None] + (y1 - y0)[:, None] * frac
    xs = np.clip(xs, 0, W - 1)
    ys = np.clip(ys, 0, H - 1)
    xl = np.minimum(np.floor(xs).astype(int), max(W - 2, 0))
    yl = np.minimum(np.floor(ys).astype(int), max(H - 2, 0))
    ax = xs - xl
    ay = ys - yl
    xh = np.minimum(xl + 1, W - 1)
    yh = np.minimum(yl + 1, H - 1)
    return xl, xh, ax, yl, yh, ay


def roi_pool(feat, rois, P):
    """Bilinear RoI pooling: ``(C, H, W)`` map -> ``(n, C, P, P)``."""
    C, H, W = feat.shape
    xl, xh, ax, yl, yh, ay = _roi_sample_coords(rois, P, H, W)
    # (n, P, P) gather indices: rows from y, cols from x
    Yl, Yh = yl[:, :, None], yh[:, :, None]
    Xl, Xh = xl[:, None, :], xh[:, None, :]
    AY, AX = ay[:, :, None], ax[:, None, :]
    w00 = (1 - AY) * (1 - AX)
    w01 = (1 - AY) * AX
    w10 = AY * (1 - AX)
    w11 = AY * AX
    out = (
        feat[:, Yl, Xl] * w00 + feat[:, Yl, Xh] * w01 + feat[:, Yh, Xl] * w10 + feat[:, Yh, Xh] * w11
    )  # (C, n, P, P)
    cache = (feat.shape, (Yl, Yh, Xl, Xh), (w00, w01, w10, w11))
    return out.transpose(1, 0, 2, 3).astype(feat.dtype, copy=False), cache


def roi_pool_backward(dout, cache):
    shape, (Yl, Yh, Xl, Xh), weights = cache
    C, H, W = shape
    n, _, P, _ = dout.shape
    m = n * P * P
    # sparse bilinear scatter as a dense (samples, cells) matrix, then one matmul
    rows = np.tile(np.arange(m), 4)
    cols = np.concatenate([np.broadcast_to(ys * W + xs, (n, P, P)).ravel()
                           for ys, xs in ((Yl, Xl), (Yl, Xh), (Yh, Xl), (Yh, Xh))])
    vals = np.concatenate([np.broadcast_to(w, (n, P, P)).ravel() for w in weights])
    scatter = np.bincount(rows * (H * W) + cols, weights=vals, minlength=m * H * W).reshape(m, H * W)
    g = dout.transpose(1, 0, 2, 3).reshape(C, m)
    return (g @ scatter.astype(dout.dtype, copy=False)).reshape(C, H, W)
