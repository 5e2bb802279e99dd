"""Image-level AUROC and per-region-overlap (PRO) curve area."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.csgraph import connected_components as _cc
from scipy.stats import rankdata

from .core import knn_indices
from .errors import InvalidArgument, ShapeError, UndefinedMetric


def _labels(labels, n) -> np.ndarray:
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError("scores and labels differ in length")
    return labels


def auroc(scores, labels) -> float:
    """Mann-Whitney U over positives vs negatives, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = _labels(labels, scores.shape[0])
    p, n = int(labels.sum()), int((~labels).sum())
    if p == 0 or n == 0:
        raise UndefinedMetric("AUROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


@dataclass(frozen=True)
class RegionMask:
    mask: np.ndarray  # flat boolean, one entry per point or pixel
    connectivity: str
    regions: tuple  # index arrays into ``mask``, ordered by smallest member

    @property
    def negatives(self) -> int:
        return int((~self.mask).sum())


def _ordered(labels: np.ndarray, members: np.ndarray) -> tuple:
    """Group ``members`` by label, ordered by smallest member index."""
    if members.size == 0:
        return ()
    order = np.lexsort((members, labels))
    labels, members = labels[order], members[order]
    cuts = np.flatnonzero(np.diff(labels)) + 1
    groups = np.split(members, cuts)
    groups.sort(key=lambda g: int(g[0]))
    return tuple(groups)


def grid_regions(mask2d) -> RegionMask:
    """8-connected components of a 2D boolean mask; indices are row-major."""
    mask2d = np.asarray(mask2d).astype(bool)
    if mask2d.ndim != 2:
        raise ShapeError("grid mask must be 2D")
    lab, _ = ndimage.label(mask2d, structure=np.ones((3, 3), dtype=int))
    flat = lab.ravel()
    members = np.flatnonzero(flat)
    return RegionMask(mask2d.ravel(), "grid-8", _ordered(flat[members], members))


def point_regions(points, mask, k: int = 8) -> RegionMask:
    """Components of the mutual k-NN graph restricted to the positive points."""
    points = np.asarray(points, dtype=np.float64)
    mask = _labels(mask, points.shape[0])
    pos = np.flatnonzero(mask)
    if pos.size == 0:
        return RegionMask(mask, "point-knn", ())
    if pos.size == 1:
        return RegionMask(mask, "point-knn", (pos,))
    kk = min(k, pos.size - 1)
    nbrs = knn_indices(points[pos], kk)
    rows = np.repeat(np.arange(pos.size), kk)
    directed = sp.csr_matrix((np.ones(rows.size), (rows, nbrs.ravel())), shape=(pos.size, pos.size))
    mutual = directed.minimum(directed.T)
    _, lab = _cc(mutual, directed=False)
    return RegionMask(mask, "point-knn", _ordered(lab, pos))


def connected_components(mask, points: Optional[np.ndarray] = None, k: int = 8) -> list:
    """Region index lists for a 2D grid mask, or a point mask when ``points`` is given."""
    rm = grid_regions(mask) if points is None else point_regions(points, mask, k)
    return [r.tolist() for r in rm.regions]


def pro_curve(scores, regions: RegionMask, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean region overlap) for predictions ``score >= t`` at each threshold."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    neg = np.sort(scores[~regions.mask])
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    pro = np.zeros(thresholds.shape)
    for r in regions.regions:
        rs = np.sort(scores[r])
        pro += (rs.size - np.searchsorted(rs, thresholds, side="left")) / rs.size
    return fpr, pro / len(regions.regions)


def area_to_limit(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """Trapezoid area of the curve on [0, fpr_limit], interpolating at the limit, divided by the limit."""
    x = np.concatenate([[0.0], fpr, [1.0]])
    y = np.concatenate([[0.0], pro, [1.0]])
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    inside = x <= fpr_limit
    xs, ys = x[inside], y[inside]
    if xs[-1] < fpr_limit:
        j = np.searchsorted(x, fpr_limit, side="right")
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        yl = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        xs, ys = np.append(xs, fpr_limit), np.append(ys, yl)
    return float(np.trapezoid(ys, xs) / fpr_limit)


def select_thresholds(scores, n_thresholds: int) -> np.ndarray:
    """Sorted unique scores, thinned to ``n_thresholds`` evenly spaced quantiles."""
    uniq = np.unique(np.asarray(scores, dtype=np.float64))
    if n_thresholds < 2:
        raise InvalidArgument("need at least two thresholds")
    if uniq.size > n_thresholds:
        uniq = uniq[np.unique(np.round(np.linspace(0, uniq.size - 1, n_thresholds)).astype(int))]
    return uniq


def p_pro(scores, regions: RegionMask, fpr_limit: float = 0.3, n_thresholds: int = 200) -> float:
    if not 0 < fpr_limit <= 1:
        raise InvalidArgument("fpr_limit must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape[0] != regions.mask.shape[0]:
        raise ShapeError("scores and mask differ in length")
    if not regions.regions:
        raise UndefinedMetric("PRO needs at least one anomalous region")
    if regions.negatives == 0:
        raise UndefinedMetric("PRO needs at least one negative point")
    fpr, pro = pro_curve(scores, regions, select_thresholds(scores, n_thresholds))
    return area_to_limit(fpr, pro, fpr_limit)


def metric_report(per_class: dict) -> dict:
    """``{class: {i_roc, p_pro}}`` plus class means (None entries skipped)."""
    out = {"per_class": {c: dict(v) for c, v in sorted(per_class.items())}}
    for key in ("i_roc", "p_pro"):
        vals = [v[key] for v in per_class.values() if v.get(key) is not None]
        out[f"mean_{key}"] = float(np.mean(vals)) if vals else None
    return out
