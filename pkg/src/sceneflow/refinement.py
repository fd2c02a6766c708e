"""Residual refinement of the transport flow over the source cloud's k-NN graph."""

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, as_tensor
from .point_features import CHANNELS, extract_point_features, init_point_feature_params


def init_refine_params(rng, channels=CHANNELS, depth=1):
    """Graph-conv stack on 3-channel flow input, plus a zero-initialised 128 -> 3 head."""
    blocks = init_point_feature_params(rng, in_channels=3, channels=channels, depth=depth)
    head = (
        Tensor(np.zeros((channels[-1], 3)), requires_grad=True),
        Tensor(np.zeros(3), requires_grad=True),
    )
    return blocks, head


def refine_flow(sf_prime, pc_t, graph, blocks, head):
    """``sf_prime + head(h(sf_prime))`` where ``h`` runs on edges ``[sf'_j ; p_j - p_i]`` of ``pc_t``."""
    sf = as_tensor(sf_prime)
    pts = np.asarray(pc_t, dtype=np.float64)
    if sf.shape != pts.shape:
        raise ShapeError(f"refine_flow: flow {sf.shape} does not align with cloud {pts.shape}")
    if len(graph) != len(pts):
        raise ShapeError(f"refine_flow: graph has {len(graph)} rows, cloud has {len(pts)}")
    w, b = head
    residual = extract_point_features(pts, blocks, graph, initial=sf) @ w + b
    return sf + residual, residual
