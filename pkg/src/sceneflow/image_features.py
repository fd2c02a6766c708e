"""Strided convolutional image pyramid and feature sampling at projected points."""

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, add, as_tensor, conv2d, gather_rows, instance_norm, leaky_relu, mul, reshape
from .point_features import uniform_init

CHANNELS = (16, 32, 64, 128)
TOTAL_STRIDE = 16
KERNEL = 3
MIN_EXTENT = 16


def init_fpn_params(rng, channels=CHANNELS, convs_per_level=1, in_channels=3):
    """Per level: a stride-2 conv followed by ``convs_per_level - 1`` stride-1 convs."""
    levels = []
    c = in_channels
    for c_out in channels:
        level = []
        for i in range(convs_per_level):
            c_in = c if i == 0 else c_out
            fan_in = KERNEL * KERNEL * c_in
            w = uniform_init(rng, fan_in, (KERNEL, KERNEL, c_in, c_out))
            level.append((w, Tensor(np.zeros(c_out), requires_grad=True)))
        levels.append(level)
        c = c_out
    return levels


def fpn_forward(image, levels):
    """Coarsest pyramid level of an H x W x 3 image in [0, 1].

    Every conv is followed by instance normalisation and LeakyReLU(0.1).
    """
    img = as_tensor(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"fpn_forward: expected H x W x 3 image, got {img.shape}")
    if img.shape[0] < MIN_EXTENT or img.shape[1] < MIN_EXTENT:
        raise ShapeError(f"fpn_forward: image {img.shape} is smaller than {MIN_EXTENT}x{MIN_EXTENT}")
    x = img
    for level in levels:
        for i, (w, b) in enumerate(level):
            x = conv2d(x, w, b, stride=2 if i == 0 else 1)
            x = leaky_relu(instance_norm(x), 0.1)
    return x


def feature_grid_coords(pixel_coords, stride=TOTAL_STRIDE):
    """Full-resolution pixel coordinates to coarse-grid positions (cell centres align)."""
    return (np.asarray(pixel_coords, dtype=np.float64) + 0.5) / stride - 0.5


def bilinear_stencil(grid_xy, height, width):
    """Flat cell indices (N x 4) and weights (N x 4) with border clamping."""
    x = np.clip(grid_xy[:, 0], 0.0, width - 1)
    y = np.clip(grid_xy[:, 1], 0.0, height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = x - x0
    wy = y - y0
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    wts = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1)
    return idx, wts


def sample_at_projections(feature_map, pixel_coords, valid, stride=TOTAL_STRIDE):
    """Bilinearly sample an h x w x C map at N full-resolution pixel positions.

    Invalid points get the zero vector.
    """
    fmap = as_tensor(feature_map)
    h, w, c = fmap.shape
    valid = np.asarray(valid, dtype=bool)
    idx, wts = bilinear_stencil(feature_grid_coords(pixel_coords, stride), h, w)
    wts = wts * valid[:, None]
    flat = reshape(fmap, (h * w, c))
    out = None
    for s in range(4):
        term = mul(gather_rows(flat, idx[:, s]), wts[:, s : s + 1])
        out = term if out is None else add(out, term)
    return out
