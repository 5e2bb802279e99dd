"""Text and image formats for clouds, masks and configuration.

xyz-grid: first line ``W H``, then W*H lines ``x y z`` in row-major raster
order. Any non-finite coordinate (``nan``, ``inf``) marks an invalid pixel.

PLY: ASCII only, ``element vertex N`` with x, y, z as the first three
properties. A ``comment grid W H`` header line marks an organized cloud.

Masks: 8-bit PGM (P5 or P2); 0 is good, anything else anomalous.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import PointCloud
from .errors import ConfigError, LoadError, ParseError

log = logging.getLogger(__name__)

FORMATS = {"xyz-grid": ".xyz", "ply-ascii": ".ply"}


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else "nan"


def write_xyz_grid(path, cloud: PointCloud):
    if not cloud.organized:
        raise LoadError("xyz-grid needs an organized cloud")
    rows, cols = cloud.grid_shape
    pts = np.where(cloud.valid_mask[:, None], cloud.points, np.nan)
    lines = [f"{cols} {rows}"] + [" ".join(_fmt(v) for v in p) for p in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz_grid(path) -> PointCloud:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise ParseError(path, 1, "missing 'W H' header")
    head = lines[0].split()
    try:
        cols, rows = int(head[0]), int(head[1])
        if len(head) != 2 or cols <= 0 or rows <= 0:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(path, 1, f"expected 'W H' header, got {lines[0]!r}") from None
    body = [(i + 2, ln) for i, ln in enumerate(lines[1:]) if ln.strip()]
    if len(body) != rows * cols:
        raise ParseError(path, len(lines), f"expected {rows * cols} point rows, found {len(body)}")
    pts = np.empty((rows * cols, 3))
    for k, (lineno, ln) in enumerate(body):
        parts = ln.split()
        if len(parts) != 3:
            raise ParseError(path, lineno, f"expected 3 coordinates, got {len(parts)}")
        try:
            pts[k] = [float(v) for v in parts]
        except ValueError:
            raise ParseError(path, lineno, f"bad coordinate in {ln!r}") from None
    return PointCloud(pts, grid_shape=(rows, cols))


def write_ply(path, cloud: PointCloud):
    pts = cloud.points if cloud.organized else cloud.valid_points
    head = ["ply", "format ascii 1.0"]
    if cloud.organized:
        pts = np.where(cloud.valid_mask[:, None], pts, np.nan)
        head.append(f"comment grid {cloud.grid_shape[1]} {cloud.grid_shape[0]}")
    head += [f"element vertex {len(pts)}", "property float x", "property float y", "property float z", "end_header"]
    body = [" ".join(_fmt(v) for v in p) for p in pts]
    Path(path).write_text("\n".join(head + body) + "\n")


def read_ply(path) -> PointCloud:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    n = None
    grid = None
    end = None
    for i, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1:2] != ["ascii"]:
            raise ParseError(path, i, "only ASCII PLY is supported")
        if parts[:2] == ["comment", "grid"]:
            try:
                grid = (int(parts[3]), int(parts[2]))
            except (ValueError, IndexError):
                raise ParseError(path, i, "bad 'comment grid W H' line") from None
        if parts[:2] == ["element", "vertex"]:
            try:
                n = int(parts[2])
            except (ValueError, IndexError):
                raise ParseError(path, i, "bad vertex count") from None
        if parts[0] == "end_header":
            end = i
            break
    if end is None or n is None:
        raise ParseError(path, len(lines), "incomplete PLY header")
    pts = np.empty((n, 3))
    for k in range(n):
        lineno = end + 1 + k
        if lineno > len(lines):
            raise ParseError(path, lineno, f"expected {n} vertices, file ends after {k}")
        parts = lines[lineno - 1].split()
        try:
            pts[k] = [float(v) for v in parts[:3]]
            if len(parts) < 3:
                raise ValueError
        except ValueError:
            raise ParseError(path, lineno, "bad vertex row") from None
    if grid is not None:
        return PointCloud(pts, grid_shape=grid)
    ok = np.all(np.isfinite(pts), axis=1)
    return PointCloud(pts[ok])


def write_mask_pgm(path, mask: np.ndarray):
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise LoadError("mask must be 2D")
    rows, cols = mask.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write((mask * 255).astype(np.uint8).tobytes())


def _pgm_tokens(raw: bytes, count: int) -> tuple[list, int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            break
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_mask_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    tokens, pos = _pgm_tokens(raw, 4)
    if len(tokens) < 4 or tokens[0] not in (b"P5", b"P2"):
        raise LoadError(f"{path}: not a P5/P2 PGM")
    try:
        cols, rows, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise LoadError(f"{path}: bad PGM header") from None
    if tokens[0] == b"P5":
        dtype = np.uint8 if maxval < 256 else ">u2"
        width = 1 if maxval < 256 else 2
        data = raw[pos:pos + rows * cols * width]
        if len(data) != rows * cols * width:
            raise LoadError(f"{path}: truncated PGM")
        vals = np.frombuffer(data, dtype=dtype)
    else:
        try:
            vals = np.array([int(t) for t in raw[pos:].split()][: rows * cols])
        except ValueError:
            raise LoadError(f"{path}: bad PGM pixel value") from None
        if vals.size != rows * cols:
            raise LoadError(f"{path}: truncated PGM")
    return vals.reshape(rows, cols) > 0


def read_cloud(path, fmt: str) -> PointCloud:
    if fmt == "xyz-grid":
        return read_xyz_grid(path)
    if fmt == "ply-ascii":
        return read_ply(path)
    raise ConfigError(f"unknown dataset format {fmt!r}")


def write_cloud(path, cloud: PointCloud, fmt: str):
    if fmt == "xyz-grid":
        write_xyz_grid(path, cloud)
    elif fmt == "ply-ascii":
        write_ply(path, cloud)
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")


@dataclass
class Sample:
    sample_id: str
    split: str  # "train" or "test"
    defect: str  # "good" or the defect type
    cloud: PointCloud
    mask: Optional[np.ndarray]  # per-point boolean, None when unknown

    @property
    def label(self) -> bool:
        return self.defect != "good"


def _files(folder: Path, fmt: str) -> list[Path]:
    return sorted(folder.glob(f"*{FORMATS[fmt]}")) if folder.is_dir() else []


def load_dataset(root, fmt: str = "xyz-grid") -> list[Sample]:
    """Samples under ``root/{train/good, test/<defect>, ground_truth/<defect>}``.

    Test defects without a mask file are kept (they still count for image
    level metrics) with ``mask=None`` and a logged warning.
    """
    root = Path(root)
    if fmt not in FORMATS:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    if not root.is_dir():
        raise LoadError(f"dataset root {root} is not a directory")
    out = []
    for p in _files(root / "train" / "good", fmt):
        cloud = read_cloud(p, fmt)
        out.append(Sample(f"train/good/{p.stem}", "train", "good", cloud, np.zeros(len(cloud), bool)))
    test = root / "test"
    for d in sorted(x for x in test.iterdir() if x.is_dir()) if test.is_dir() else []:
        for p in _files(d, fmt):
            cloud = read_cloud(p, fmt)
            mask = None
            if d.name == "good":
                mask = np.zeros(len(cloud), bool)
            else:
                mp = root / "ground_truth" / d.name / f"{p.stem}.pgm"
                if mp.exists():
                    mask = read_mask_pgm(mp).ravel()
                    if mask.size != len(cloud):
                        raise LoadError(f"{mp}: mask has {mask.size} pixels, cloud has {len(cloud)} points")
                else:
                    log.warning("no ground-truth mask for %s; excluded from P-PRO", p)
            out.append(Sample(f"test/{d.name}/{p.stem}", "test", d.name, cloud, mask))
    return out


def dataset_classes(root) -> dict[str, Path]:
    """``{name: path}``: the root itself if it has a train/ folder, else each such child."""
    root = Path(root)
    if (root / "train").is_dir() or (root / "test").is_dir():
        return {root.name: root}
    if not root.is_dir():
        raise LoadError(f"dataset root {root} is not a directory")
    return {d.name: d for d in sorted(root.iterdir()) if (d / "train").is_dir()}


def parse_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for i, ln in enumerate(text.splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ConfigError(f"{path}:{i}: expected 'key = value'")
        key, value = (s.strip() for s in ln.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{i}: empty key")
        out[key] = value
    return out
