"""Synthetic organized scans: one object on a table seen by an orthographic depth sensor.

The sensor sits at the origin looking down +z; the table is the plane
z = ``table_depth``. Each raster cell holds the first surface hit along its
ray, so the result is a grid-organized cloud with a flat border (table) that
background removal can find. Anomalies displace depth inside a disc centred
on the object's visible surface and are labelled exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import PointCloud
from .errors import InvalidArgument

SHAPES = ("sphere", "box", "plane")
ANOMALIES = ("none", "bump", "dent", "hole")


@dataclass(frozen=True)
class SyntheticSpec:
    base_shape: str = "sphere"
    n_points: int = 128 * 128  # raster size; rounded to a square grid
    anomaly: str = "bump"
    anomaly_radius: float = 0.02
    anomaly_depth: Optional[float] = None  # default: 5 noise sigmas
    noise_sigma: float = 0.0005
    seed: int = 0
    object_size: float = 0.07  # sphere radius / half-width of box and slab
    extent: float = 0.15  # raster covers [-extent, extent]^2 in x and y
    table_depth: float = 0.6
    jitter: float = 0.01  # random object offset and relative size change

    def __post_init__(self):
        if self.base_shape not in SHAPES:
            raise InvalidArgument(f"unknown base shape {self.base_shape!r}")
        if self.anomaly not in ANOMALIES:
            raise InvalidArgument(f"unknown anomaly {self.anomaly!r}")
        if self.side < 8:
            raise InvalidArgument("raster must be at least 8x8")
        if self.noise_sigma < 0 or self.anomaly_radius < 0 or self.object_size <= 0:
            raise InvalidArgument("sizes and noise must be non-negative")
        if self.anomaly != "none" and self.anomaly_radius > 0.6 * self.object_size:
            raise InvalidArgument("anomaly does not fit on the object")
        if self.object_size * 1.5 > self.extent:
            raise InvalidArgument("object does not fit in the raster with a table border")

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.n_points)))

    @property
    def depth_amplitude(self) -> float:
        return 5.0 * self.noise_sigma if self.anomaly_depth is None else self.anomaly_depth


def _object_height(shape: str, size: float, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Height above the table of the object's top surface (NaN where the ray misses it)."""
    h = np.full(dx.shape, np.nan)
    if shape == "sphere":
        rho2 = dx * dx + dy * dy
        inside = rho2 < size * size
        h[inside] = size + np.sqrt(size * size - rho2[inside])
    elif shape == "box":
        inside = (np.abs(dx) < size) & (np.abs(dy) < size)
        h[inside] = size
    else:
        inside = (np.abs(dx) < size) & (np.abs(dy) < size)
        h[inside] = 0.02
    return h


def _profile(kind: str, r: np.ndarray, radius: float) -> np.ndarray:
    """Displacement profile in [0, 1] with support r < radius."""
    t = np.clip(r / radius, 0.0, 1.0)
    if kind == "hole":
        return (t < 1.0).astype(np.float64)
    # flat top over the inner half, cosine shoulder outside it
    p = np.where(t < 0.5, 1.0, 0.5 * (1.0 + np.cos(np.pi * (t - 0.5) / 0.5)))
    return np.where(t < 1.0, p, 0.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[PointCloud, np.ndarray]:
    """(organized cloud, per-point boolean anomaly mask), bit-identical for a given SyntheticSpec."""
    rng = np.random.default_rng(spec.seed)
    side = spec.side
    size = spec.object_size * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0))
    centre = rng.uniform(-spec.jitter, spec.jitter, 2)
    g = (np.arange(side) + 0.5) / side * 2.0 * spec.extent - spec.extent
    x, y = np.meshgrid(g, -g)  # row 0 is the top (+y) of the raster
    dx, dy = x - centre[0], y - centre[1]
    height = _object_height(spec.base_shape, size, dx, dy)
    on_obj = np.isfinite(height)
    mask = np.zeros(x.shape, dtype=bool)
    if spec.anomaly != "none" and spec.anomaly_radius > 0:
        # anomaly centre on the upper part of the object so the disc stays on it
        reach = max(size - spec.anomaly_radius, 0.0) * (0.5 if spec.base_shape == "sphere" else 0.9)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        rad = reach * np.sqrt(rng.uniform(0.0, 1.0))
        ax, ay = centre[0] + rad * np.cos(ang), centre[1] + rad * np.sin(ang)
        prof = _profile(spec.anomaly, np.hypot(x - ax, y - ay), spec.anomaly_radius)
        mask = (prof > 0) & on_obj
        sign = 1.0 if spec.anomaly == "bump" else -1.0
        height = np.where(mask, height + sign * spec.depth_amplitude * prof, height)
    else:
        rng.uniform(0.0, 1.0, 2)  # keep the noise stream aligned across anomaly kinds
    z = spec.table_depth - np.where(on_obj, height, 0.0)
    z = z + rng.normal(0.0, spec.noise_sigma, z.shape) if spec.noise_sigma > 0 else z
    pts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    return PointCloud(pts, grid_shape=(side, side)), mask.ravel()


def nominal(spec: SyntheticSpec) -> SyntheticSpec:
    return replace(spec, anomaly="none")


def synthetic_suite(spec: SyntheticSpec, n_train: int = 10, n_good: int = 20, n_defect: int = 20,
                    defects: tuple = ("bump", "dent")) -> list:
    """Train/test samples for one object class; defect kinds alternate over the defective samples."""
    from .io import Sample

    out = []
    base = spec.seed * 100_003
    for i in range(n_train):
        cloud, mask = generate_synthetic(replace(spec, anomaly="none", seed=base + i))
        out.append(Sample(f"train/good/{i:03d}", "train", "good", cloud, mask))
    for i in range(n_good):
        cloud, mask = generate_synthetic(replace(spec, anomaly="none", seed=base + 10_000 + i))
        out.append(Sample(f"test/good/{i:03d}", "test", "good", cloud, mask))
    for i in range(n_defect):
        kind = defects[i % len(defects)]
        cloud, mask = generate_synthetic(replace(spec, anomaly=kind, seed=base + 20_000 + i))
        out.append(Sample(f"test/{kind}/{i:03d}", "test", kind, cloud, mask))
    return out
