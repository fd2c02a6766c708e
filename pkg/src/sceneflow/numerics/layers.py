"""Image-domain layers: strided convolution and instance normalisation (HWC layout)."""

import numpy as np

from ..errors import ShapeError
from .tensor import _make, as_tensor


def conv2d(x, weight, bias, stride=2):
    """Zero-padded cross-correlation of an ``H x W x Cin`` map.

    ``weight`` is ``kh x kw x Cin x Cout`` with odd kernel extents; padding is
    ``kh // 2`` on every border, so a 3x3 kernel at stride 2 maps ``H`` to
    ``ceil(H / 2)``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected HxWxC input and 4-d kernel, got {x.shape}, {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {weight.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {weight.shape}")
    h, w = x.shape[:2]
    if h < 2 or w < 2:
        raise ShapeError(f"conv2d: spatial extent too small: {x.shape}")
    ph, pw = kh // 2, kw // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = np.zeros((h + 2 * ph, w + 2 * pw, cin))
    xp[ph : ph + h, pw : pw + w] = x.data

    def window(arr, dy, dx):
        return arr[dy : dy + stride * (ho - 1) + 1 : stride, dx : dx + stride * (wo - 1) + 1 : stride]

    out = np.empty((ho, wo, cout))
    out[...] = bias.data
    for dy in range(kh):
        for dx in range(kw):
            out += window(xp, dy, dx) @ weight.data[dy, dx]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    window(gxp, dy, dx)[...] += g @ weight.data[dy, dx].T
            gx = gxp[ph : ph + h, pw : pw + w].copy()
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            g2 = g.reshape(-1, cout)
            for dy in range(kh):
                for dx in range(kw):
                    gw[dy, dx] = window(xp, dy, dx).reshape(-1, cin).T @ g2
        if bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "conv2d")


def conv2d_stride2(x, weight, bias):
    return conv2d(x, weight, bias, stride=2)


def instance_norm(x, eps=1e-5):
    """Per-channel ``(x - mean) / sqrt(var + eps)`` over the spatial extent (population variance).

    A single spatial position normalises to zero (``eps`` guards the zero variance).
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"instance_norm: expected HxWxC, got {x.shape}")
    if x.shape[0] * x.shape[1] < 1:
        raise ShapeError(f"instance_norm: empty spatial extent {x.shape}")
    mu = x.data.mean(axis=(0, 1))
    centered = x.data - mu
    var = (centered * centered).mean(axis=(0, 1))
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def bw(g):
        gm = g.mean(axis=(0, 1))
        gym = (g * y).mean(axis=(0, 1))
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), bw, "instance_norm")
