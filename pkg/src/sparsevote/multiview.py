"""Orthographic depth rendering from a ring of viewpoints and per-point feature fusion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import PointCloud
from .errors import InvalidArgument, ShapeError

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass(frozen=True)
class ViewPose:
    eye: np.ndarray
    target: np.ndarray
    up: np.ndarray
    image_size: tuple[int, int] = (224, 224)
    ortho_half_extent: float = 1.0

    def __post_init__(self):
        for name in ("eye", "target", "up"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        fwd = self.target - self.eye
        if not np.linalg.norm(fwd) > 0:
            raise InvalidArgument("eye and target coincide")
        if np.linalg.norm(np.cross(fwd, self.up)) <= 1e-12 * np.linalg.norm(fwd) * np.linalg.norm(self.up):
            raise InvalidArgument("up vector is parallel to the view direction")
        if not self.ortho_half_extent > 0:
            raise InvalidArgument("ortho_half_extent must be positive")
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) orthonormal camera axes."""
        fwd = self.target - self.eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right /= np.linalg.norm(right)
        return right, np.cross(right, fwd), fwd

    @property
    def pixel_pitch(self) -> float:
        return 2.0 * self.ortho_half_extent / max(self.image_size)


@dataclass(frozen=True)
class DepthImage:
    depth: np.ndarray  # (H, W), +inf where empty
    point_index: np.ndarray  # (H, W), -1 where empty

    @property
    def size(self) -> tuple[int, int]:
        return self.depth.shape


def make_views(cloud: PointCloud, n_views: int, radius_scale: float = 2.0,
               image_size=(224, 224), margin: float = 1.05) -> list[ViewPose]:
    """Fibonacci-sphere viewpoints around the cloud centroid.

    A single view sits on the +z axis; otherwise eye heights run
    1 - (2i + 1)/n with golden-angle azimuth steps.
    """
    if n_views < 1:
        raise InvalidArgument("n_views must be >= 1")
    pts = cloud.valid_points
    centroid = pts.mean(axis=0) if len(pts) else np.zeros(3)
    bound = float(np.linalg.norm(pts - centroid, axis=1).max()) if len(pts) else 1.0
    bound = bound if bound > 0 else 1.0
    if n_views == 1:
        dirs = np.array([[0.0, 0.0, 1.0]])
    else:
        i = np.arange(n_views)
        z = 1.0 - (2.0 * i + 1.0) / n_views
        r = np.sqrt(1.0 - z * z)
        phi = i * GOLDEN_ANGLE
        dirs = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    poses = []
    for d in dirs:
        up = np.array([0.0, 0.0, 1.0])
        if np.linalg.norm(np.cross(d, up)) < 1e-9:
            up = np.array([1.0, 0.0, 0.0])
        poses.append(ViewPose(centroid + radius_scale * bound * d, centroid, up, image_size, margin * bound))
    return poses


def project(points: np.ndarray, pose: ViewPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous (col, row) image coordinates and axial depth of each point."""
    right, up, fwd = pose.frame()
    rel = np.asarray(points, dtype=np.float64) - pose.eye
    h = pose.ortho_half_extent
    rows, cols = pose.image_size
    col = (rel @ right + h) / (2 * h) * cols
    row = (h - rel @ up) / (2 * h) * rows
    return col, row, rel @ fwd


def _pixels(col, row, depth, pose):
    rows, cols = pose.image_size
    c = np.floor(col).astype(np.int64)
    r = np.floor(row).astype(np.int64)
    inside = (c >= 0) & (c < cols) & (r >= 0) & (r < rows) & (depth > 0)
    return r, c, inside


def render_depth(cloud: PointCloud, pose: ViewPose) -> DepthImage:
    """Z-buffered orthographic depth image; ties go to the lower point index."""
    rows, cols = pose.image_size
    depth = np.full((rows, cols), np.inf)
    index = np.full((rows, cols), -1, dtype=np.int64)
    pts = cloud.valid_points
    if len(pts) == 0:
        return DepthImage(depth, index)
    col, row, z = project(pts, pose)
    r, c, inside = _pixels(col, row, z, pose)
    ids = np.flatnonzero(inside)
    flat = r[ids] * cols + c[ids]
    order = np.lexsort((ids, z[ids], flat))
    flat, ids = flat[order], ids[order]
    first = np.ones(len(flat), dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    depth.ravel()[flat[first]] = z[ids[first]]
    index.ravel()[flat[first]] = ids[first]
    return DepthImage(depth, index)


def bilinear(field: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample an (H', W', d) field at continuous cell coords (u = column, v = row), edge-clamped."""
    hh, ww = field.shape[:2]
    u = np.clip(u, 0.0, ww - 1.0)
    v = np.clip(v, 0.0, hh - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), ww - 1)
    v0 = np.minimum(np.floor(v).astype(np.int64), hh - 1)
    u1 = np.minimum(u0 + 1, ww - 1)
    v1 = np.minimum(v0 + 1, hh - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    top = field[v0, u0] * (1 - fu) + field[v0, u1] * fu
    bot = field[v1, u0] * (1 - fu) + field[v1, u1] * fu
    return top * (1 - fv) + bot * fv


def sample_point_features(cloud: PointCloud, pose: ViewPose, feature_map: np.ndarray,
                          visibility: DepthImage, occlusion_tol: Optional[float] = None
                          ) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear feature lookup for every visible point; others get a zero row.

    A point is visible when its depth is within ``occlusion_tol`` (default
    1.5 pixel pitches) of the z-buffer at its pixel.
    """
    rows, cols = pose.image_size
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if feature_map.ndim != 3:
        raise ShapeError("feature map must be (H', W', d)")
    fh, fw, d = feature_map.shape
    if rows % fh or cols % fw:
        raise ShapeError(f"feature map {fh}x{fw} does not tile image {rows}x{cols}")
    if visibility.depth.shape != (rows, cols):
        raise ShapeError("visibility image size does not match the pose")
    tol = 1.5 * pose.pixel_pitch if occlusion_tol is None else occlusion_tol
    pts = cloud.valid_points
    out = np.zeros((len(pts), d))
    flags = np.zeros(len(pts), dtype=bool)
    if len(pts) == 0:
        return out, flags
    col, row, z = project(pts, pose)
    r, c, inside = _pixels(col, row, z, pose)
    ids = np.flatnonzero(inside)
    vis = z[ids] <= visibility.depth[r[ids], c[ids]] + tol
    ids = ids[vis]
    flags[ids] = True
    sx, sy = cols // fw, rows // fh
    out[ids] = bilinear(feature_map, col[ids] / sx - 0.5, row[ids] / sy - 0.5)
    return out, flags


def fuse_views(per_view: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Mean of each point's rows over the views where it is visible (zero if none)."""
    if not per_view:
        raise InvalidArgument("no views to fuse")
    n, d = per_view[0][0].shape
    total = np.zeros((n, d))
    count = np.zeros(n)
    for rows, flags in per_view:
        rows = np.asarray(rows, dtype=np.float64)
        flags = np.asarray(flags, dtype=bool)
        if rows.shape != (n, d) or flags.shape != (n,):
            raise ShapeError("views disagree on point count or feature width")
        total[flags] += rows[flags]
        count += flags
    seen = count > 0
    total[seen] /= count[seen, None]
    return total


def write_pgm16(path, image: DepthImage):
    """Binary 16-bit PGM of depth in millimetres; empty pixels are 0."""
    depth = image.depth
    mm = np.where(np.isfinite(depth), np.clip(np.round(depth * 1000.0), 0, 65535), 0).astype(">u2")
    rows, cols = depth.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())
