"""Background-plane removal for organized scans.

The plane is estimated by RANSAC on a strip of pixels along the image border,
then every point closer than ``ransac_eps`` to it is discarded. A DBSCAN pass
over what remains rejects sparse outliers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .core import PointCloud
from .errors import DegenerateInput, EmptyResult, InvalidArgument, RequiresOrganizedCloud


@dataclass(frozen=True)
class Plane:
    """The set {x : normal . x = offset}."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise InvalidArgument("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(points, dtype=np.float64) @ self.normal - self.offset)


@dataclass(frozen=True)
class PreprocessConfig:
    strip_width_px: int = 10
    ransac_iters: int = 200
    ransac_eps: float = 0.005
    dbscan_eps: float = 0.01
    dbscan_min_pts: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.strip_width_px <= 0 or self.ransac_iters <= 0 or self.dbscan_min_pts <= 0:
            raise InvalidArgument("preprocess integer parameters must be positive")
        if not (self.ransac_eps > 0 and self.dbscan_eps > 0):
            raise InvalidArgument("preprocess thresholds must be positive")


class Cleaned(NamedTuple):
    cloud: PointCloud
    plane: Plane
    background: np.ndarray  # original indices within ransac_eps of the plane
    noise: np.ndarray  # original indices rejected by DBSCAN
    kept: np.ndarray  # original index of every row of ``cloud``


def drop_invalid(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Unorganized copy holding only valid points, plus new -> original index map."""
    idx = cloud.valid_indices
    return PointCloud(cloud.points[idx]), idx


def boundary_strip(cloud: PointCloud, strip_width_px: int) -> np.ndarray:
    if not cloud.organized:
        raise RequiresOrganizedCloud("boundary strip needs a grid-organized cloud")
    rows, cols = cloud.grid_shape
    w = int(strip_width_px)
    r, c = np.divmod(np.arange(rows * cols), cols)
    on_strip = (r < w) | (r >= rows - w) | (c < w) | (c >= cols - w)
    return np.flatnonzero(on_strip & cloud.valid_mask)


def _canonical_sign(normal: np.ndarray) -> np.ndarray:
    # largest-magnitude component positive, so equal planes compare equal
    return normal if normal[np.argmax(np.abs(normal))] > 0 else -normal


def fit_plane_lstsq(points: np.ndarray) -> Plane:
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = _canonical_sign(vt[-1])
    return Plane(normal, float(normal @ centroid))


def ransac_plane(points: np.ndarray, iters: int, eps: float, seed: int) -> tuple[Plane, np.ndarray]:
    """Seeded RANSAC plane fit with a least-squares refit on the consensus set.

    Returns the refit plane and the indices of ``points`` within ``eps`` of it.
    Ties on inlier count keep the earliest iteration.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < 3:
        raise DegenerateInput(f"plane fit needs at least 3 points, got {n}")
    rng = np.random.default_rng(seed)
    scale = max(float(np.ptp(points, axis=0).max()), 1e-300)
    best_count, best = -1, None
    for _ in range(int(iters)):
        a, b, c = points[rng.choice(n, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm <= 1e-12 * scale * scale:
            continue
        normal /= norm
        count = int(np.count_nonzero(np.abs(points @ normal - normal @ a) < eps))
        if count > best_count:
            best_count, best = count, (normal, float(normal @ a))
    if best is None:
        raise DegenerateInput("every sampled triple was collinear")
    normal, offset = best
    inliers = np.abs(points @ normal - offset) < eps
    if inliers.sum() >= 3:
        plane = fit_plane_lstsq(points[inliers])
    else:
        plane = Plane(_canonical_sign(normal), offset * np.sign(normal[np.argmax(np.abs(normal))]))
    return plane, np.flatnonzero(plane.distance(points) < eps)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering; labels are 0-based in order of the first core point, -1 is noise.

    Border points go to the first cluster that reaches them in scan order.
    """
    if not eps > 0 or min_pts < 1:
        raise InvalidArgument("dbscan needs eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neigh = [np.sort(np.asarray(nb, dtype=np.int64)) for nb in tree.query_ball_point(points, eps)]
    core = np.array([len(nb) >= min_pts for nb in neigh])
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            j = stack.pop()
            for q in neigh[j]:
                if labels[q] == -1:
                    labels[q] = cluster
                    if core[q]:
                        stack.append(q)
        cluster += 1
    return labels


def remove_background(cloud: PointCloud, cfg: PreprocessConfig) -> Cleaned:
    """Drop invalid entries, the border-estimated plane and DBSCAN noise."""
    if not cloud.organized:
        raise RequiresOrganizedCloud("background removal needs a grid-organized cloud")
    valid = cloud.valid_indices
    strip = boundary_strip(cloud, cfg.strip_width_px)
    plane, _ = ransac_plane(cloud.points[strip], cfg.ransac_iters, cfg.ransac_eps, cfg.seed)
    near = plane.distance(cloud.points[valid]) < cfg.ransac_eps
    background = valid[near]
    kept = valid[~near]
    noise = np.zeros(0, dtype=np.int64)
    if cfg.dbscan_min_pts > 1 and kept.size:
        labels = dbscan(cloud.points[kept], cfg.dbscan_eps, cfg.dbscan_min_pts)
        noise = kept[labels < 0]
        kept = kept[labels >= 0]
    if kept.size == 0:
        raise EmptyResult("nothing left after background removal")
    return Cleaned(PointCloud(cloud.points[kept]), plane, background, noise, kept)
