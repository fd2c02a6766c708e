"""Synthetic rigid-motion scenes and the on-disk scene directory format.

Scene directory layout::

    intrinsics.txt   fx fy cx cy width height
    pc1.txt, pc2.txt one "x y z" per line
    img1.ppm, img2.ppm  binary P6, maxval 255
    flow.txt         one "dx dy dz" per line, aligned with pc1.txt
    mask.txt         one 0|1 per line

A dataset is a directory of numbered scene subdirectories.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, EmptySceneError, SceneFormatError
from .geometry import (
    DEFAULT_GROUND_HEIGHT,
    DEFAULT_MAX_DEPTH,
    CameraIntrinsics,
    preprocess_indices,
    project_points,
    unproject_points,
)

DEFAULT_CAMERA = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=48.0, width=128, height=96)
MIN_DEPTH = 1.0
SPLAT_RADIUS = 2


@dataclass
class ScenePair:
    pc_t: np.ndarray
    pc_t1: np.ndarray
    img_t: np.ndarray
    img_t1: np.ndarray
    cam: CameraIntrinsics
    gt_flow: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        n = len(self.pc_t)
        if self.gt_flow.shape != (n, 3) or self.mask.shape != (n,):
            raise ContractError(
                f"scene arrays misaligned: pc_t {self.pc_t.shape}, flow {self.gt_flow.shape}, "
                f"mask {self.mask.shape}"
            )
        for img in (self.img_t, self.img_t1):
            if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 16 or img.shape[1] < 16:
                raise ContractError(f"images must be H x W x 3 with H, W >= 16, got {img.shape}")

    def equals(self, other) -> bool:
        return (
            self.cam == other.cam
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("pc_t", "pc_t1", "img_t", "img_t1", "gt_flow", "mask")
            )
        )


# ---------------------------------------------------------------- generation


def rotation_matrix(axis, angle):
    """Rodrigues rotation about a unit ``axis`` by ``angle`` radians."""
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def point_colors(points):
    """Deterministic per-point RGB in [0.15, 1] hashed from the position, quantised to 1/255."""
    pts = np.asarray(points, dtype=np.float64)
    keys = np.array([[12.9898, 78.233, 37.719], [39.346, 11.135, 83.155], [73.156, 52.235, 9.151]])
    h = np.sin(pts @ keys.T) * 43758.5453
    h = h - np.floor(h)
    return np.round((0.15 + 0.85 * h) * 255.0) / 255.0


def splat_image(points, colors, cam: CameraIntrinsics, radius=SPLAT_RADIUS):
    """Render coloured discs on a black canvas with a z-buffer.

    A pixel takes the colour of the nearest point covering it; equal depths
    go to the smaller point index.
    """
    img = np.zeros((cam.height, cam.width, 3))
    uv, valid = project_points(points, cam)
    if not valid.any():
        return img
    idx = np.flatnonzero(valid)
    col0 = np.floor(uv[idx, 0]).astype(np.int64)
    row0 = np.floor(uv[idx, 1]).astype(np.int64)
    offs = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]
    rows = np.concatenate([row0 + dy for dy, _ in offs])
    cols = np.concatenate([col0 + dx for _, dx in offs])
    owner = np.tile(idx, len(offs))
    inside = (rows >= 0) & (rows < cam.height) & (cols >= 0) & (cols < cam.width)
    rows, cols, owner = rows[inside], cols[inside], owner[inside]
    pix = rows * cam.width + cols
    order = np.lexsort((owner, points[owner, 2], pix))
    pix, owner = pix[order], owner[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    flat = img.reshape(-1, 3)
    flat[pix[first]] = colors[owner[first]]
    return img


def _frustum_points(rng, n, cam, max_depth, ground_height):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        uv = np.stack([rng.uniform(0, cam.width, m), rng.uniform(0, cam.height, m)], axis=1)
        z = rng.uniform(MIN_DEPTH, max_depth, m)
        pts = unproject_points(uv, z, cam)
        out = np.concatenate([out, pts[pts[:, 1] <= ground_height]])
    return out[:n]


def _plane_points(rng, n, cam, max_depth, ground_height):
    for _ in range(100):
        centre = unproject_points(
            np.array([[rng.uniform(0.25, 0.75) * cam.width, rng.uniform(0.25, 0.6) * cam.height]]),
            np.array([rng.uniform(5.0, min(25.0, max_depth))]), cam)[0]
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        if abs(normal[2]) < 0.3:
            continue
        out = np.empty((0, 3))
        for _ in range(200):
            m = 4 * n
            uv = np.stack([rng.uniform(0, cam.width, m), rng.uniform(0, cam.height, m)], axis=1)
            rays = unproject_points(uv, np.ones(m), cam)
            denom = rays @ normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (centre @ normal) / denom
            pts = rays * s[:, None]
            ok = (np.abs(denom) > 1e-6) & (s >= MIN_DEPTH) & (s <= max_depth) & (pts[:, 1] <= ground_height)
            out = np.concatenate([out, pts[ok]])
            if len(out) >= n:
                return out[:n]
    raise ContractError("could not place a coplanar scene inside the camera frustum")


def generate_scene(seed, n_points=256, max_t=1.0, max_deg=10.0, coplanar=False, occlusion_frac=0.1,
                   cam: CameraIntrinsics = DEFAULT_CAMERA, max_depth=DEFAULT_MAX_DEPTH,
                   ground_height=DEFAULT_GROUND_HEIGHT) -> ScenePair:
    """One synthetic frame pair under a single rigid motion ``p -> R p + t``.

    Points are drawn in the camera frustum with depth in [1, max_depth]
    (or on one random plane when ``coplanar``). A random ``occlusion_frac``
    of the moved points is deleted, as is any moved point leaving the depth or
    ground limits; the mask of their sources is cleared. Both frames are then
    resampled independently to ``n_points``.
    """
    if n_points < 16:
        raise ContractError(f"n_points must be >= 16, got {n_points}")
    if not 0.0 <= occlusion_frac < 1.0:
        raise ContractError(f"occlusion_frac must lie in [0, 1), got {occlusion_frac}")
    if max_t < 0 or max_deg < 0 or max_depth <= MIN_DEPTH:
        raise ContractError("motion bounds must be nonnegative and max_depth must exceed 1 m")
    rng = np.random.default_rng(seed)
    sampler = _plane_points if coplanar else _frustum_points
    base = sampler(rng, n_points, cam, max_depth, ground_height)

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = rotation_matrix(axis, np.deg2rad(rng.uniform(-max_deg, max_deg)))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    trans = direction * rng.uniform(0.0, max_t)
    moved = base @ rot.T + trans
    flow = moved - base

    colors = point_colors(base)
    survive = np.flatnonzero(rng.random(n_points) >= occlusion_frac)
    survive = survive[(moved[survive, 2] <= max_depth) & (moved[survive, 1] <= ground_height)]
    if survive.size == 0:
        raise EmptySceneError("every moved point was occluded or left the valid range")

    img_t = splat_image(base, colors, cam)
    img_t1 = splat_image(moved[survive], colors[survive], cam)

    idx_t = preprocess_indices(base, max_depth, ground_height, n_points, rng)
    idx_t1 = survive[preprocess_indices(moved[survive], max_depth, ground_height, n_points, rng)]
    present = np.zeros(n_points, dtype=bool)
    present[idx_t1] = True
    return ScenePair(
        pc_t=base[idx_t],
        pc_t1=moved[idx_t1],
        img_t=img_t,
        img_t1=img_t1,
        cam=cam,
        gt_flow=flow[idx_t],
        mask=present[idx_t],
    )


# ----------------------------------------------------------------------- I/O


def _fmt(x):
    return format(float(x), ".17g")


def _write_rows(path, rows):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def write_ppm(path, image):
    img = np.asarray(image, dtype=np.float64)
    if img.min(initial=0.0) < 0 or img.max(initial=0.0) > 1:
        raise ContractError("image values must lie in [0, 1]")
    data = np.round(img * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _ppm_tokens(raw, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError(path, "truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path):
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "missing file")
    raw = path.read_bytes()
    tokens, start = _ppm_tokens(raw, path)
    if tokens[0] != b"P6":
        raise SceneFormatError(path, f"expected P6 magic, found {tokens[0]!r}", line=1)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SceneFormatError(path, "malformed PPM header") from None
    if maxval != 255:
        raise SceneFormatError(path, f"unsupported maxval {maxval}")
    body = raw[start : start + w * h * 3]
    if len(body) != w * h * 3:
        raise SceneFormatError(path, f"expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0


def _read_rows(path, width, kind=float):
    path = Path(path)
    if not path.is_file():
        raise SceneFormatError(path, "missing file")
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if len(parts) != width:
                raise SceneFormatError(path, f"expected {width} values, found {len(parts)}", lineno)
            try:
                rows.append([kind(p) for p in parts])
            except ValueError:
                raise SceneFormatError(path, f"malformed number in {line.strip()!r}", lineno) from None
    return rows


def write_flow(path, flow):
    _write_rows(path, np.asarray(flow, dtype=np.float64))


def read_flow(path, expected=None):
    rows = _read_rows(path, 3)
    if expected is not None and len(rows) != expected:
        raise SceneFormatError(path, f"{len(rows)} rows but the point cloud has {expected}",
                               len(rows) + 1)
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_flags(path, flags):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for f in np.asarray(flags, dtype=bool):
            fh.write("1\n" if f else "0\n")


def read_flags(path, expected=None):
    rows = _read_rows(path, 1, kind=str)
    out = []
    for lineno, (tok,) in enumerate(rows, start=1):
        if tok not in ("0", "1"):
            raise SceneFormatError(path, f"expected 0 or 1, found {tok!r}", lineno)
        out.append(tok == "1")
    if expected is not None and len(out) != expected:
        raise SceneFormatError(path, f"{len(out)} rows but the point cloud has {expected}", len(out) + 1)
    return np.array(out, dtype=bool)


def write_scene(scene: ScenePair, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    c = scene.cam
    _write_rows(d / "intrinsics.txt", [[c.fx, c.fy, c.cx, c.cy, c.width, c.height]])
    _write_rows(d / "pc1.txt", scene.pc_t)
    _write_rows(d / "pc2.txt", scene.pc_t1)
    write_ppm(d / "img1.ppm", scene.img_t)
    write_ppm(d / "img2.ppm", scene.img_t1)
    write_flow(d / "flow.txt", scene.gt_flow)
    write_flags(d / "mask.txt", scene.mask)


def read_intrinsics(path):
    rows = _read_rows(path, 6)
    if len(rows) != 1:
        raise SceneFormatError(path, f"expected exactly one line, found {len(rows)}")
    fx, fy, cx, cy, w, h = rows[0]
    if w != int(w) or h != int(h):
        raise SceneFormatError(path, "image extents must be integers", 1)
    try:
        return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))
    except ContractError as exc:
        raise SceneFormatError(path, str(exc), 1) from None


def read_scene(directory) -> ScenePair:
    d = Path(directory)
    if not d.is_dir():
        raise SceneFormatError(d, "scene directory does not exist")
    cam = read_intrinsics(d / "intrinsics.txt")
    pc1 = np.array(_read_rows(d / "pc1.txt", 3), dtype=np.float64).reshape(-1, 3)
    pc2 = np.array(_read_rows(d / "pc2.txt", 3), dtype=np.float64).reshape(-1, 3)
    if len(pc1) == 0 or len(pc2) == 0:
        raise SceneFormatError(d / ("pc1.txt" if len(pc1) == 0 else "pc2.txt"), "empty point cloud")
    flow = read_flow(d / "flow.txt", expected=len(pc1))
    mask = read_flags(d / "mask.txt", expected=len(pc1))
    img1 = read_ppm(d / "img1.ppm")
    img2 = read_ppm(d / "img2.ppm")
    for name, img in (("img1.ppm", img1), ("img2.ppm", img2)):
        if img.shape[:2] != (cam.height, cam.width):
            raise SceneFormatError(d / name, f"image is {img.shape[1]}x{img.shape[0]}, intrinsics say "
                                             f"{cam.width}x{cam.height}")
    try:
        return ScenePair(pc1, pc2, img1, img2, cam, flow, mask)
    except ContractError as exc:
        raise SceneFormatError(d, str(exc)) from None


def scene_dirs(root):
    """Numbered scene subdirectories of a dataset, in numeric order."""
    root = Path(root)
    if not root.is_dir():
        raise SceneFormatError(root, "dataset directory does not exist")
    dirs = [p for p in root.iterdir() if p.is_dir() and p.name.isdigit()]
    if not dirs:
        raise SceneFormatError(root, "dataset contains no numbered scene directories")
    return sorted(dirs, key=lambda p: int(p.name))


def read_dataset(root):
    return [read_scene(p) for p in scene_dirs(root)]


def write_dataset(scenes, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(max(len(scenes) - 1, 0))))
    for i, scene in enumerate(scenes):
        write_scene(scene, root / f"{i:0{width}d}")
    return root


def synth_dataset(seed, n_scenes, n_points=256, max_t=1.0, max_deg=10.0, coplanar_frac=0.2,
                  occlusion_frac=0.1, cam=DEFAULT_CAMERA):
    """``n_scenes`` generated scenes; scene ``i`` uses a seed derived from ``(seed, i)``.

    The coplanar scenes are the first ``round(coplanar_frac * n_scenes)`` of
    a seeded permutation.
    """
    if not 0.0 <= coplanar_frac <= 1.0:
        raise ContractError(f"coplanar_frac must lie in [0, 1], got {coplanar_frac}")
    rng = np.random.default_rng([seed, 0x5CE4E])
    coplanar = np.zeros(n_scenes, dtype=bool)
    coplanar[rng.permutation(n_scenes)[: int(round(coplanar_frac * n_scenes))]] = True
    return [
        generate_scene([seed, i], n_points, max_t, max_deg, bool(coplanar[i]), occlusion_frac, cam)
        for i in range(n_scenes)
    ]


__all__ = [
    "DEFAULT_CAMERA",
    "ScenePair",
    "generate_scene",
    "point_colors",
    "read_dataset",
    "read_flags",
    "read_flow",
    "read_ppm",
    "read_scene",
    "rotation_matrix",
    "scene_dirs",
    "splat_image",
    "synth_dataset",
    "write_dataset",
    "write_flags",
    "write_flow",
    "write_ppm",
    "write_scene",
]
