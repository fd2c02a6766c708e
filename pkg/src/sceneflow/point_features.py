"""Graph-convolution point features over a k-NN graph.

A block maps per-point features ``f`` (N x c) to N x c_out by building edge
features ``[f_j ; p_j - p_i]`` for every neighbour ``j`` of ``i``, pushing
them through a small per-edge MLP with LeakyReLU(0.1) and max-pooling over
the neighbourhood.
"""

import numpy as np

from .errors import ShapeError
from .geometry import KnnGraph
from .numerics import (
    Tensor,
    as_tensor,
    concat,
    gather_max,
    gather_rows,
    leaky_relu,
    reduce_max,
    reshape,
)

CHANNELS = (32, 64, 128)
NEGATIVE_SLOPE = 0.1


def uniform_init(rng, fan_in, shape, name=None):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_linear(rng, c_in, c_out):
    return (uniform_init(rng, c_in, (c_in, c_out)), Tensor(np.zeros(c_out), requires_grad=True))


def init_point_feature_params(rng, in_channels=3, channels=CHANNELS, depth=1):
    """Layers for a stack of graph-conv blocks.

    Returns one entry per block; each entry is a list of ``depth`` (weight,
    bias) pairs, the first taking ``c + 3`` inputs.
    """
    blocks = []
    c = in_channels
    for c_out in channels:
        layer = [init_linear(rng, c + 3, c_out)]
        layer += [init_linear(rng, c_out, c_out) for _ in range(depth - 1)]
        blocks.append(layer)
        c = c_out
    return blocks


def _offsets(points, nbr):
    return points[nbr] - points[:, None, :]


def edge_features(features, points, graph: KnnGraph):
    """``e_ij = [f_j ; p_j - p_i]`` for each neighbour ``j`` of ``i``: N x k x (c+3)."""
    pts = np.asarray(points, dtype=np.float64)
    nbr = graph.neighbor_indices
    if nbr.shape[0] != pts.shape[0]:
        raise ShapeError(f"edge_features: graph has {nbr.shape[0]} rows, cloud has {pts.shape[0]} points")
    if nbr.size and (nbr.min() < 0 or nbr.max() >= pts.shape[0]):
        raise ShapeError("edge_features: neighbour index out of range")
    off = Tensor(_offsets(pts, nbr))
    if features is None or as_tensor(features).shape[1] == 0:
        return off
    features = as_tensor(features)
    if features.shape[0] != pts.shape[0]:
        raise ShapeError(f"edge_features: features {features.shape} vs cloud {pts.shape}")
    return concat([gather_rows(features, nbr), off], axis=-1)


def graph_conv_block(features, points, graph: KnnGraph, layer, negative_slope=NEGATIVE_SLOPE):
    """One block: per-edge MLP then max over the k neighbours.

    The first linear map acts on ``[f_j ; p_j - p_i]``. Its output is
    ``f_j W_f + p_j W_p - p_i W_p + b``, so it is computed per point and
    gathered rather than materialised per edge.
    """
    pts = np.asarray(points, dtype=np.float64)
    nbr = graph.neighbor_indices
    w0, b0 = layer[0]
    c = 0 if features is None else as_tensor(features).shape[1]
    if w0.shape[0] != c + 3:
        raise ShapeError(f"graph_conv_block: weight {w0.shape} expects {w0.shape[0] - 3} feature "
                         f"channels, got {c}")
    if nbr.shape[0] != pts.shape[0]:
        raise ShapeError(f"graph_conv_block: graph has {nbr.shape[0]} rows, cloud has {pts.shape[0]}")
    pos = Tensor(pts) @ w0[c:]
    node = pos if c == 0 else as_tensor(features) @ w0[:c] + pos
    centre = b0 - pos
    if len(layer) == 1:
        return leaky_relu(gather_max(node, nbr) + centre, negative_slope)
    n, k = nbr.shape
    h = leaky_relu(gather_rows(node, nbr) + reshape(centre, (n, 1, -1)), negative_slope)
    for w, b in layer[1:]:
        h = leaky_relu(h @ w + b, negative_slope)
    return reduce_max(h, axis=1)


def extract_point_features(points, blocks, graph: KnnGraph, initial=None):
    """Chain the blocks on one shared graph.

    ``initial`` holds the layer-0 features (N x c0); ``None`` means the point
    coordinates themselves. Pass an N x 0 array for offsets-only edges.
    """
    pts = np.asarray(points, dtype=np.float64)
    if graph.k > len(pts):
        raise ShapeError(f"graph k={graph.k} exceeds cloud size {len(pts)}")
    f = Tensor(pts) if initial is None else as_tensor(initial)
    if f.shape[1] == 0:
        f = None
    for layer in blocks:
        f = graph_conv_block(f, pts, graph, layer)
    return f
