"""Scene-flow evaluation metrics and the key=value report format."""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import project_points

FIELDS = ("epe3d", "acc3ds", "acc3dr", "out3d", "epe2d")


@dataclass
class FlowMetrics:
    epe3d: float
    acc3ds: float
    acc3dr: float
    out3d: float
    epe2d: float
    n_points: int
    n_valid2d: int

    def as_dict(self):
        return asdict(self)


def relative_error(epe, gt_norm):
    """``epe / ||gt||``; zero ground truth gives 0 for an exact match and +inf otherwise."""
    epe = np.asarray(epe, dtype=np.float64)
    gt_norm = np.asarray(gt_norm, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = epe / gt_norm
    return np.where(gt_norm > 0, rel, np.where(epe == 0, 0.0, np.inf))


def compute_metrics(est, gt, pc_t, cam, mask=None, semantics="or") -> FlowMetrics:
    """Per-scene metrics over the points selected by ``mask`` (all points when ``None``).

    ``semantics`` combines the absolute and relative thresholds with ``or``
    (default) or ``and``. EPE2D only uses points whose three projections
    (p, p + est, p + gt) are valid; it is NaN when there are none.
    """
    if semantics not in ("or", "and"):
        raise ValueError(f"semantics must be 'or' or 'and', got {semantics!r}")
    est = np.asarray(getattr(est, "flow", est), dtype=np.float64)
    est = np.asarray(getattr(est, "data", est), dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pts = np.asarray(pc_t, dtype=np.float64)
    if est.shape != gt.shape or gt.shape != pts.shape:
        raise ValueError(f"rows must align: est {est.shape}, gt {gt.shape}, cloud {pts.shape}")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool)
        est, gt, pts = est[sel], gt[sel], pts[sel]
    n = len(pts)
    if n == 0:
        return FlowMetrics(math.nan, math.nan, math.nan, math.nan, math.nan, 0, 0)
    epe = np.linalg.norm(est - gt, axis=1)
    rel = relative_error(epe, np.linalg.norm(gt, axis=1))
    both = np.logical_or if semantics == "or" else np.logical_and
    acc3ds = both(epe < 0.05, rel < 0.05)
    acc3dr = both(epe < 0.1, rel < 0.1)
    out3d = both(epe > 0.3, rel > 0.1)

    uv0, v0 = project_points(pts, cam)
    uve, ve = project_points(pts + est, cam)
    uvg, vg = project_points(pts + gt, cam)
    ok = v0 & ve & vg
    epe2d = np.linalg.norm((uve - uv0) - (uvg - uv0), axis=1)[ok]
    return FlowMetrics(
        epe3d=float(epe.mean()),
        acc3ds=100.0 * float(acc3ds.mean()),
        acc3dr=100.0 * float(acc3dr.mean()),
        out3d=100.0 * float(out3d.mean()),
        epe2d=float(epe2d.mean()) if epe2d.size else math.nan,
        n_points=n,
        n_valid2d=int(ok.sum()),
    )


def aggregate_metrics(per_scene) -> FlowMetrics:
    """Point-weighted mean over scenes (EPE2D weighted by valid 2D points)."""
    per_scene = [m for m in per_scene if m.n_points > 0]
    total = sum(m.n_points for m in per_scene)
    total2d = sum(m.n_valid2d for m in per_scene)
    if total == 0:
        return FlowMetrics(math.nan, math.nan, math.nan, math.nan, math.nan, 0, 0)

    def wmean(field):
        return sum(getattr(m, field) * m.n_points for m in per_scene) / total

    epe2d = (sum(m.epe2d * m.n_valid2d for m in per_scene if m.n_valid2d) / total2d
             if total2d else math.nan)
    return FlowMetrics(wmean("epe3d"), wmean("acc3ds"), wmean("acc3dr"), wmean("out3d"), epe2d,
                       total, total2d)


def format_report(metrics: FlowMetrics, per_scene=None) -> str:
    """``key=value`` summary line followed by a one-metric-per-line block."""
    summary = " ".join(f"{k}={getattr(metrics, k):.6f}" for k in FIELDS)
    summary += f" n_points={metrics.n_points} n_valid2d={metrics.n_valid2d}"
    lines = [summary]
    if per_scene:
        for name, m in per_scene:
            lines.append(f"scene={name} " + " ".join(f"{k}={getattr(m, k):.6f}" for k in FIELDS))
    lines.append("[metrics]")
    lines += [f"{k} {getattr(metrics, k):.17g}" for k in FIELDS]
    return "\n".join(lines) + "\n"


def parse_report(text):
    """Read the machine-readable block of a report back into a dict."""
    out, inside = {}, False
    for line in text.splitlines():
        if line.strip() == "[metrics]":
            inside = True
            continue
        if inside and line.strip():
            key, value = line.split()
            out[key] = float(value)
    return out
