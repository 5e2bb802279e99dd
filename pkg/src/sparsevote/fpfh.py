"""Fast Point Feature Histograms.

Each point gets three angular histograms (alpha, phi, theta) of the Darboux
frame between its normal and each neighbour's normal (SPFH). The FPFH of a
point adds the inverse-distance weighted mean SPFH of its neighbours, and each
block is rescaled to sum to 100.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud, _TREE_SLACK
from .errors import InvalidArgument

ALPHA_RANGE = (-1.0, 1.0)
PHI_RANGE = (-1.0, 1.0)
THETA_RANGE = (-np.pi, np.pi)


@dataclass(frozen=True)
class FpfhConfig:
    normal_radius: float = 0.02
    feature_radius: float = 0.04
    bins_per_angle: int = 11
    leaf_size: float = 0.005  # voxel downsampling before description; 0 disables
    viewpoint: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not (self.normal_radius > 0 and self.feature_radius > 0):
            raise InvalidArgument("FPFH radii must be positive")
        if self.bins_per_angle < 1:
            raise InvalidArgument("bins_per_angle must be positive")
        if self.leaf_size < 0:
            raise InvalidArgument("leaf_size must be non-negative")

    @property
    def dim(self) -> int:
        return 3 * self.bins_per_angle


def _pairs_within(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All ordered pairs (i, j), i != j, with |p_i - p_j| <= radius, sorted by (i, j)."""
    tree = cKDTree(points)
    sdm = tree.sparse_distance_matrix(tree, radius * (1 + _TREE_SLACK), output_type="ndarray")
    i = sdm["i"].astype(np.int64)
    j = sdm["j"].astype(np.int64)
    keep = i != j
    i, j = i[keep], j[keep]
    diff = points[j] - points[i]
    d2 = np.einsum("ij,ij->i", diff, diff)
    keep = d2 <= radius * radius
    i, j = i[keep], j[keep]
    order = np.lexsort((j, i))
    i, j = i[order], j[order]
    d = np.sqrt(d2[keep][order])
    return i, j, d


def estimate_normals(cloud: PointCloud, radius: float, viewpoint=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """PCA normals oriented towards ``viewpoint``.

    Returns ``(normals, ok)``; points with fewer than 3 neighbours inside
    ``radius`` are flagged ``ok=False`` and get a NaN normal.
    """
    pts = cloud.valid_points
    n = pts.shape[0]
    normals = np.full((n, 3), np.nan)
    if n == 0:
        return normals, np.zeros(0, dtype=bool)
    i, j, _ = _pairs_within(pts, radius)
    count = np.bincount(i, minlength=n)
    ok = count >= 3
    q = pts[j] - pts[i]
    # covariance of {p_i} U neighbours, computed relative to p_i
    m = np.zeros((n, 3))
    np.add.at(m, i, q)
    s = np.zeros((n, 3, 3))
    np.add.at(s, i, q[:, :, None] * q[:, None, :])
    size = (count + 1).astype(np.float64)
    mean = m / size[:, None]
    cov = s / size[:, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov[ok])
    nv = vecs[:, :, 0]
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts[ok]
    flip = np.einsum("ij,ij->i", nv, to_view) < 0
    nv[flip] *= -1
    normals[ok] = nv
    return normals, ok


def pair_features(p1, n1, p2, n2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Darboux-frame angles (alpha, phi, theta) for source/target pairs (vectorized).

    The endpoint whose normal is closer to the connecting line acts as source.
    A zero cross product (normal parallel to the connecting line) yields
    alpha = theta = 0.
    """
    p1, n1, p2, n2 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (p1, n1, p2, n2))
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=1)
    dpn = dp / dist[:, None]
    a1 = np.einsum("ij,ij->i", n1, dpn)
    a2 = np.einsum("ij,ij->i", n2, dpn)
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    src = np.where(swap[:, None], n2, n1)
    tgt = np.where(swap[:, None], n1, n2)
    dpn = np.where(swap[:, None], -dpn, dpn)
    phi = np.where(swap, -a2, a1)
    v = np.cross(dpn, src)
    vn = np.linalg.norm(v, axis=1)
    nz = vn > 0
    v[nz] /= vn[nz, None]
    v[~nz] = 0.0
    w = np.cross(src, v)
    alpha = np.einsum("ij,ij->i", v, tgt)
    theta = np.arctan2(np.einsum("ij,ij->i", w, tgt), np.einsum("ij,ij->i", src, tgt))
    return alpha, phi, theta


def _bin(values, lo, hi, bins):
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _spfh_from_pairs(pts, normals, i, j, n, bins) -> np.ndarray:
    alpha, phi, theta = pair_features(pts[i], normals[i], pts[j], normals[j])
    hist = np.zeros((n, 3 * bins))
    for block, (vals, (lo, hi)) in enumerate(zip((alpha, phi, theta), (ALPHA_RANGE, PHI_RANGE, THETA_RANGE))):
        np.add.at(hist, (i, block * bins + _bin(vals, lo, hi, bins)), 1.0)
    count = np.bincount(i, minlength=n).astype(np.float64)
    has = count > 0
    hist[has] /= count[has, None]
    return hist


def spfh(cloud: PointCloud, normals: np.ndarray, index: int, radius: float, bins: int = 11,
         ok: Optional[np.ndarray] = None) -> np.ndarray:
    """SPFH of one point: per-block normalized angle histogram over its radius neighbours.

    A point without usable neighbours gets an all-zero histogram.
    """
    pts = cloud.valid_points
    ok = np.all(np.isfinite(normals), axis=1) if ok is None else ok
    d = np.linalg.norm(pts - pts[index], axis=1)
    nb = np.flatnonzero((d <= radius) & (d > 0) & ok)
    if nb.size == 0 or not ok[index]:
        return np.zeros(3 * bins)
    i = np.zeros(nb.size, dtype=np.int64)
    sub = np.vstack([pts[index], pts[nb]])
    subn = np.vstack([normals[index], normals[nb]])
    return _spfh_from_pairs(sub, subn, i, np.arange(1, nb.size + 1), 1, bins)[0]


def fpfh(cloud: PointCloud, cfg: FpfhConfig, normals: Optional[np.ndarray] = None,
         ok: Optional[np.ndarray] = None) -> np.ndarray:
    """(N, 3*bins) FPFH descriptors of the valid points of ``cloud`` (no downsampling)."""
    pts = cloud.valid_points
    n = pts.shape[0]
    bins = cfg.bins_per_angle
    if n == 0:
        return np.zeros((0, 3 * bins))
    if normals is None:
        normals, ok = estimate_normals(cloud, cfg.normal_radius, cfg.viewpoint)
    elif ok is None:
        ok = np.all(np.isfinite(normals), axis=1)
    i, j, d = _pairs_within(pts, cfg.feature_radius)
    keep = ok[i] & ok[j] & (d > 0)
    i, j, d = i[keep], j[keep], d[keep]
    hist = _spfh_from_pairs(pts, normals, i, j, n, bins)
    acc = np.zeros_like(hist)
    np.add.at(acc, i, hist[j] / d[:, None])
    k = np.bincount(i, minlength=n).astype(np.float64)
    has = k > 0
    out = np.zeros_like(hist)
    out[has] = hist[has] + acc[has] / k[has, None]
    blocks = out.reshape(n, 3, bins)
    sums = blocks.sum(axis=2, keepdims=True)
    np.divide(blocks * 100.0, sums, out=blocks, where=sums > 0)
    return blocks.reshape(n, 3 * bins)


def voxel_downsample(points: np.ndarray, leaf: float) -> np.ndarray:
    """Centroid of the points in each occupied leaf cell."""
    points = np.asarray(points, dtype=np.float64)
    idx = np.floor((points - points.min(axis=0)) / leaf).astype(np.int64)
    _, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    sums = np.zeros((counts.size, 3))
    np.add.at(sums, inverse.reshape(-1), points)
    return sums / counts[:, None]


def fpfh_features(cloud: PointCloud, cfg: FpfhConfig) -> np.ndarray:
    """FPFH for every valid point, computed on a voxel-downsampled copy.

    Descriptors are transferred back to the full-resolution points by nearest
    neighbour. With ``cfg.leaf_size == 0`` this is plain :func:`fpfh`.
    """
    pts = cloud.valid_points
    if cfg.leaf_size == 0 or pts.shape[0] == 0:
        return fpfh(cloud, cfg)
    down = voxel_downsample(pts, cfg.leaf_size)
    desc = fpfh(PointCloud(down), cfg)
    _, nearest = cKDTree(down).query(pts, k=1)
    return desc[nearest]
