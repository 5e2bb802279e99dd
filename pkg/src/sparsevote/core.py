"""Point clouds, sparse voxel grids and exact neighbour search."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientPoints, InvalidArgument, ShapeError

# relative slack used to widen tree queries before the exact re-check
_TREE_SLACK = 1e-9


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points, optionally laid out on a rows x cols sensor grid.

    ``valid`` marks entries that hold a real measurement; invalid entries are
    placeholders (typically NaN) kept so grid indexing stays intact.
    """

    points: np.ndarray
    grid_shape: Optional[tuple[int, int]] = None
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "points", pts)
        if self.valid is None:
            if self.grid_shape is not None:
                valid = np.all(np.isfinite(pts), axis=1)
            else:
                valid = None
        else:
            valid = np.asarray(self.valid, dtype=bool).reshape(-1)
            if valid.shape[0] != pts.shape[0]:
                raise ShapeError("valid mask length does not match point count")
            valid = valid & np.all(np.isfinite(pts), axis=1)
        object.__setattr__(self, "valid", valid)
        if self.grid_shape is not None:
            rows, cols = (int(v) for v in self.grid_shape)
            if rows * cols != pts.shape[0]:
                raise ShapeError(f"grid {rows}x{cols} needs {rows * cols} points, got {pts.shape[0]}")
            object.__setattr__(self, "grid_shape", (rows, cols))
        elif valid is None and not np.all(np.isfinite(pts)):
            raise InvalidArgument("unorganized cloud contains non-finite coordinates; pass a valid mask")

    def __len__(self):
        return self.points.shape[0]

    @property
    def organized(self) -> bool:
        return self.grid_shape is not None

    @property
    def valid_mask(self) -> np.ndarray:
        if self.valid is None:
            return np.ones(len(self), dtype=bool)
        return self.valid

    @property
    def valid_indices(self) -> np.ndarray:
        return np.flatnonzero(self.valid_mask)

    @property
    def valid_points(self) -> np.ndarray:
        if self.valid is None:
            return self.points
        return self.points[self.valid]


def _strictly_ordered(coords: np.ndarray) -> bool:
    """True when rows are strictly increasing in lexicographic order (hence also unique)."""
    if coords.shape[0] < 2:
        return True
    d = np.diff(coords, axis=0)
    lead = d[np.arange(d.shape[0]), np.argmax(d != 0, axis=1)]
    return bool(np.all(lead > 0))


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Map from integer cell index to a feature vector of length ``channels``.

    Stored as lexicographically sorted ``coords`` (M x 3, int64) with aligned
    ``features`` (M x channels). All-zero rows are dropped on construction, so
    absence of a cell always means an exact zero vector.
    """

    coords: np.ndarray
    features: np.ndarray
    channels: int
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    cell_size: float = 1.0
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.channels <= 0:
            raise InvalidArgument("channels must be positive")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.size != coords.shape[0] * self.channels:
            raise ShapeError(f"features do not match {coords.shape[0]} cells x {self.channels} channels")
        feats = feats.reshape(coords.shape[0], self.channels)
        if self.cell_size <= 0:
            raise InvalidArgument("cell_size must be positive")
        keep = np.any(feats != 0.0, axis=1)
        coords, feats = coords[keep], feats[keep]
        if not _strictly_ordered(coords):
            order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
            coords, feats = coords[order], feats[order]
            if coords.shape[0] > 1 and np.any(np.all(coords[1:] == coords[:-1], axis=1)):
                raise InvalidArgument("duplicate cell index in sparse grid")
        object.__setattr__(self, "coords", np.ascontiguousarray(coords))
        object.__setattr__(self, "features", np.ascontiguousarray(feats))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @classmethod
    def from_cells(cls, cells: dict, channels: int, origin=(0.0, 0.0, 0.0), cell_size=1.0):
        if not cells:
            return cls(np.zeros((0, 3), np.int64), np.zeros((0, channels)), channels, origin, cell_size)
        keys = np.array(list(cells.keys()), dtype=np.int64)
        vals = np.array([np.asarray(v, dtype=np.float64).reshape(channels) for v in cells.values()])
        return cls(keys, vals, channels, origin, cell_size)

    @classmethod
    def from_dense(cls, dense: np.ndarray, offset=(0, 0, 0), origin=(0.0, 0.0, 0.0), cell_size=1.0):
        """Build from a dense (X, Y, Z, C) array whose [0, 0, 0] cell sits at ``offset``."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.ndim == 3:
            dense = dense[..., None]
        nz = np.argwhere(np.any(dense != 0.0, axis=-1))
        feats = dense[nz[:, 0], nz[:, 1], nz[:, 2]]
        return cls(nz + np.asarray(offset, dtype=np.int64), feats, dense.shape[-1], origin, cell_size)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def cells(self) -> dict:
        return {tuple(int(v) for v in c): f for c, f in zip(self.coords, self.features)}

    def get(self, index) -> np.ndarray:
        if self._lookup is None:
            object.__setattr__(self, "_lookup", {tuple(int(v) for v in c): i for i, c in enumerate(self.coords)})
        i = self._lookup.get(tuple(int(v) for v in index))
        if i is None:
            return np.zeros(self.channels)
        return self.features[i]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Inclusive min and max cell index; raises on an empty grid."""
        if len(self) == 0:
            raise InvalidArgument("empty grid has no bounds")
        return self.coords.min(axis=0), self.coords.max(axis=0)

    def to_dense(self, lo, shape) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.int64)
        out = np.zeros(tuple(shape) + (self.channels,))
        rel = self.coords - lo
        inside = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
        rel = rel[inside]
        out[rel[:, 0], rel[:, 1], rel[:, 2]] = self.features[inside]
        return out

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, features.shape[1], self.origin, self.cell_size)


def voxelize(cloud: PointCloud, cell_size: float, reducer: str = "count",
             point_features: Optional[np.ndarray] = None) -> SparseVoxelGrid:
    """Bin valid points into cells of edge ``cell_size`` anchored at the cloud's min corner.

    ``reducer="count"`` stores per-cell occupancy counts (1 channel);
    ``"mean-feature"`` averages ``point_features`` rows (aligned with
    ``cloud.points``) over each cell.
    """
    if not cell_size > 0:
        raise InvalidArgument("cell_size must be positive")
    if reducer not in ("count", "mean-feature"):
        raise InvalidArgument(f"unknown reducer {reducer!r}")
    mask = cloud.valid_mask
    pts = cloud.points[mask]
    if reducer == "mean-feature":
        if point_features is None:
            raise InvalidArgument("mean-feature reducer needs point_features")
        feats = np.asarray(point_features, dtype=np.float64).reshape(len(cloud), -1)[mask]
        channels = feats.shape[1]
    else:
        channels = 1
    if pts.shape[0] == 0:
        return SparseVoxelGrid(np.zeros((0, 3), np.int64), np.zeros((0, channels)), channels, (0.0, 0.0, 0.0), cell_size)
    origin = pts.min(axis=0)
    idx = np.floor((pts - origin) / cell_size).astype(np.int64)
    keys, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if reducer == "count":
        vals = counts.astype(np.float64)[:, None]
    else:
        vals = np.zeros((keys.shape[0], channels))
        np.add.at(vals, inverse, feats)
        vals /= counts[:, None]
    return SparseVoxelGrid(keys, vals, channels, tuple(origin), cell_size)


def _sq_dists(points: np.ndarray, i: int, cand: np.ndarray) -> np.ndarray:
    diff = points[cand] - points[i]
    return np.einsum("ij,ij->i", diff, diff)


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Exact k nearest other points for every row of ``points``.

    Ties are broken by smaller index. Returns an (N, k) array.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise InvalidArgument("k must be positive")
    if n < k + 1:
        raise InsufficientPoints(f"need at least {k + 1} points for k={k}, got {n}")
    tree = cKDTree(points)
    q = min(k + 2, n)
    dist, cand = tree.query(points, k=q)
    cand = cand.reshape(n, q)
    dist = dist.reshape(n, q)
    rows = np.repeat(np.arange(n), q).reshape(n, q)
    diff = points[cand] - points[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[cand == rows] = np.inf
    order = np.lexsort((cand.ravel(), d2.ravel(), rows.ravel())).reshape(n, q)
    cand = np.take_along_axis(cand, order % q, axis=1)
    d2 = np.take_along_axis(d2, order % q, axis=1)
    out = cand[:, :k].copy()
    if q < n:
        # an unseen point may tie with the k-th neighbour: redo those rows exactly
        kth = d2[:, k - 1]
        redo = dist[:, -1] ** 2 <= kth * (1 + 4 * _TREE_SLACK) + 1e-300
        for i in np.flatnonzero(redo):
            ball = np.asarray(tree.query_ball_point(points[i], np.sqrt(kth[i]) * (1 + _TREE_SLACK) + 1e-300), dtype=np.int64)
            ball = ball[ball != i]
            bd2 = _sq_dists(points, i, ball)
            out[i] = ball[np.lexsort((ball, bd2))[:k]]
    return out


def knn_search(cloud: PointCloud, k: int) -> np.ndarray:
    """k nearest neighbours of every valid point, as indices into ``cloud.points``.

    Row ``r`` corresponds to the r-th valid point.
    """
    vidx = cloud.valid_indices
    if len(vidx) < k + 1:
        raise InsufficientPoints(f"need at least {k + 1} valid points for k={k}, got {len(vidx)}")
    local = knn_indices(cloud.points[vidx], k)
    return vidx[local]


def radius_search(cloud: PointCloud, center_index: int, radius: float) -> np.ndarray:
    """Indices of valid points (excluding the centre) with distance <= radius, ascending."""
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    mask = cloud.valid_mask
    if not mask[center_index]:
        raise InvalidArgument(f"center {center_index} is not a valid point")
    vidx = np.flatnonzero(mask)
    pts = cloud.points[vidx]
    tree = cKDTree(pts)
    cand = np.asarray(tree.query_ball_point(cloud.points[center_index], radius * (1 + _TREE_SLACK)), dtype=np.int64)
    cand = vidx[cand]
    cand = cand[cand != center_index]
    d2 = _sq_dists(cloud.points, center_index, cand)
    return np.sort(cand[d2 <= radius * radius])


def radius_neighbors(points: np.ndarray, radius: float, tree: Optional[cKDTree] = None) -> list[np.ndarray]:
    """Per-point sorted neighbour index arrays within ``radius`` (self excluded)."""
    points = np.asarray(points, dtype=np.float64)
    tree = tree if tree is not None else cKDTree(points)
    raw = tree.query_ball_point(points, radius * (1 + _TREE_SLACK))
    out = []
    r2 = radius * radius
    for i, cand in enumerate(raw):
        cand = np.asarray(cand, dtype=np.int64)
        cand = cand[cand != i]
        d2 = _sq_dists(points, i, cand)
        out.append(np.sort(cand[d2 <= r2]))
    return out
