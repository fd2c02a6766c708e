"""Point clouds, pinhole projection, k-NN graphs and cloud preprocessing.

Clouds are ``N x 3`` float arrays in camera coordinates (x right, y down,
z forward), in meters.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, EmptySceneError

Z_MIN = 0.001
DEFAULT_MAX_DEPTH = 35.0
DEFAULT_GROUND_HEIGHT = 1.4


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ContractError(f"image extents must be >= 1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class KnnGraph:
    neighbor_indices: np.ndarray  # N x k, row i starts with i itself

    @property
    def k(self):
        return self.neighbor_indices.shape[1]

    def __len__(self):
        return self.neighbor_indices.shape[0]


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ContractError(f"a point cloud must be N x 3 with N >= 1, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ContractError("point cloud contains non-finite coordinates")
    return pts


def project_points(points, cam: CameraIntrinsics, z_min=Z_MIN):
    """Pinhole projection. Returns ``(uv, valid)``.

    Points with ``z <= z_min`` or falling outside ``[0, width) x [0, height)``
    are flagged invalid; their ``uv`` is still returned (NaN-free, computed with
    ``z`` clamped to ``z_min``).
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    zs = np.where(z > z_min, z, z_min)
    u = cam.fx * pts[:, 0] / zs + cam.cx
    v = cam.fy * pts[:, 1] / zs + cam.cy
    valid = (z > z_min) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), valid


def unproject_points(uv, z, cam: CameraIntrinsics):
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    x = (uv[:, 0] - cam.cx) * z / cam.fx
    y = (uv[:, 1] - cam.cy) * z / cam.fy
    return np.stack([x, y, z], axis=1)


def _squared_distances(points, rows, cols):
    diff = points[cols] - points[rows][..., None, :]
    return np.sum(diff * diff, axis=-1)


def knn_brute_force(points, k) -> KnnGraph:
    """O(N^2) reference: full distance sort, self first, ties broken by smaller index."""
    pts = as_cloud(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, N={n}], got {k}")
    rows = np.arange(n)
    d2 = _squared_distances(pts, rows, np.broadcast_to(rows, (n, n)))
    d2[rows, rows] = -1.0
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return KnnGraph(np.ascontiguousarray(order))


def _knn_kdtree(pts, k) -> KnnGraph:
    n = len(pts)
    tree = cKDTree(pts)
    dist, _ = tree.query(pts, k=k)
    dist = dist.reshape(n, -1)
    radius = dist[:, -1] * (1.0 + 1e-9) + 1e-12
    out = np.empty((n, k), dtype=np.int64)
    for i, cand in enumerate(tree.query_ball_point(pts, radius)):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        d2 = _squared_distances(pts, np.array([i]), cand[None, :])[0]
        d2[cand == i] = -1.0
        out[i] = cand[np.argsort(d2, kind="stable")[:k]]
    return KnnGraph(out)


def knn_search(points, k, method="auto") -> KnnGraph:
    """k nearest neighbours of every point, ties by smaller index.

    Each row starts with the point itself, even when exact duplicates exist.

    ``method`` is ``"brute"``, ``"kdtree"`` or ``"auto"`` (brute force up to
    2048 points). Both routes return identical graphs.
    """
    pts = as_cloud(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, N={n}], got {k}")
    if method == "auto":
        method = "brute" if n <= 2048 else "kdtree"
    if method == "brute":
        return knn_brute_force(pts, k)
    if method == "kdtree":
        return _knn_kdtree(pts, k)
    raise ValueError(f"unknown knn method {method!r}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def preprocess_indices(points, max_depth=DEFAULT_MAX_DEPTH, ground_height=DEFAULT_GROUND_HEIGHT,
                       n_sample=2048, seed=None):
    """Indices into ``points`` of the filtered, resampled cloud.

    Drops ``z > max_depth`` and ``y > ground_height`` (ground, y-down). When at
    least ``n_sample`` points survive, draws ``n_sample`` without replacement;
    otherwise every survivor is kept once (shuffled) and the remainder is
    drawn uniformly with replacement.
    """
    if n_sample < 1:
        raise ContractError(f"n_sample must be >= 1, got {n_sample}")
    pts = np.asarray(points, dtype=np.float64)
    keep = np.flatnonzero((pts[:, 2] <= max_depth) & (pts[:, 1] <= ground_height))
    if keep.size == 0:
        raise EmptySceneError(
            f"no points left after depth <= {max_depth} m and height <= {ground_height} m filtering"
        )
    rng = _rng(seed)
    if keep.size >= n_sample:
        return keep[rng.choice(keep.size, n_sample, replace=False)]
    extra = rng.choice(keep.size, n_sample - keep.size, replace=True)
    return keep[np.concatenate([rng.permutation(keep.size), extra])]


def preprocess_cloud(points, max_depth=DEFAULT_MAX_DEPTH, ground_height=DEFAULT_GROUND_HEIGHT,
                     n_sample=2048, seed=None) -> np.ndarray:
    pts = as_cloud(points)
    return pts[preprocess_indices(pts, max_depth, ground_height, n_sample, seed)]
