"""Late fusion of image and point features, plus the early-fusion input builder."""

import numpy as np

from .errors import ShapeError
from .numerics import as_tensor, concat, leaky_relu
from .point_features import init_linear

FUSED_CHANNELS = 256


def init_fusion_params(rng, in_channels=256, n_mlps=1, width=FUSED_CHANNELS):
    layers = []
    c = in_channels
    for _ in range(n_mlps):
        layers.append(init_linear(rng, c, width))
        c = width
    return layers


def fuse_features(point_feats, image_feats, layers):
    """Concatenate per-point features and apply the fusion MLP (LeakyReLU 0.1 after each layer)."""
    pf, imf = as_tensor(point_feats), as_tensor(image_feats)
    if pf.shape[0] != imf.shape[0]:
        raise ShapeError(f"fuse_features: row counts differ, {pf.shape} vs {imf.shape}")
    width = pf.shape[1] + imf.shape[1]
    if layers[0][0].shape[0] != width:
        raise ShapeError(f"fuse_features: concatenated width {width} does not match weight "
                         f"{layers[0][0].shape}")
    x = concat([pf, imf], axis=1)
    for w, b in layers:
        x = leaky_relu(x @ w + b, 0.1)
    return x


def sample_rgb_nearest(image, pixel_coords, valid):
    """RGB of the nearest pixel for each projected point; invalid points get zeros."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    uv = np.asarray(pixel_coords, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    col = np.clip(np.floor(uv[:, 0]).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor(uv[:, 1]).astype(np.int64), 0, h - 1)
    return img[row, col] * valid[:, None]


def early_fuse(points, rgb_at_points):
    """Per-point ``[x, y, z, r, g, b]`` input for the point branch."""
    pts = np.asarray(points, dtype=np.float64)
    rgb = np.asarray(rgb_at_points, dtype=np.float64)
    if rgb.shape != (pts.shape[0], 3):
        raise ShapeError(f"early_fuse: rgb shape {rgb.shape} does not match cloud {pts.shape}")
    return np.concatenate([pts, rgb], axis=1)
