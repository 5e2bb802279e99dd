"""2D feature maps for rendered views.

Two extractors share one entry point: a seeded random convolution pyramid
(bias-free 3x3 conv, ReLU, 2x average pooling per level) and a reader for
precomputed feature fields stored in VGF1 containers.

VGF1 layout, all little-endian: ``b"VGF1"``, then uint32 ``n_views, H, W, d``,
then ``n_views`` row-major float32 blocks of shape (H, W, d).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidArgument, LoadError, ShapeError
from .multiview import DepthImage

VGF_MAGIC = b"VGF1"


@dataclass(frozen=True)
class Extractor2DConfig:
    kind: str = "builtin-pyramid"
    channels: int = 64
    levels: int = 3
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("builtin-pyramid", "external-file"):
            raise InvalidArgument(f"unknown extractor kind {self.kind!r}")
        if self.kind == "external-file" and not self.path:
            raise InvalidArgument("external-file extractor needs a path")
        if self.channels < 1 or self.levels < 1:
            raise InvalidArgument("channels and levels must be positive")


def normalize_depth(image: DepthImage) -> np.ndarray:
    """Finite depths min-max scaled to [0, 1]; empty pixels (and flat images) are 0."""
    d = image.depth
    finite = np.isfinite(d)
    out = np.zeros(d.shape)
    if finite.any():
        lo, hi = d[finite].min(), d[finite].max()
        if hi > lo:
            out[finite] = (d[finite] - lo) / (hi - lo)
    return out


def pyramid_weights(channels: int, levels: int, seed: int) -> list[np.ndarray]:
    """Fixed (3, 3, c_in, c_out) kernels drawn N(0, 1) and scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed)
    weights = []
    c_in = 1
    for _ in range(levels):
        w = rng.standard_normal((3, 3, c_in, channels))
        weights.append(w / np.sqrt(9.0 * c_in))
        c_in = channels
    return weights


def conv2d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' 2D cross-correlation of (H, W, C) with (kh, kw, C, D)."""
    kh, kw, c, dout = w.shape
    if x.shape[2] != c:
        raise ShapeError("input channels do not match kernel")
    ph, pw = kh // 2, kw // 2
    hgt, wid = x.shape[:2]
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((hgt, wid, dout))
    for dy in range(kh):
        for dx in range(kw):
            out += xp[dy:dy + hgt, dx:dx + wid] @ w[dy, dx]
    return out


def avg_pool2(x: np.ndarray) -> np.ndarray:
    hgt, wid = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:hgt, :wid]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def pyramid_forward(x: np.ndarray, weights: list[np.ndarray]) -> np.ndarray:
    if x.ndim == 2:
        x = x[:, :, None]
    for w in weights:
        x = avg_pool2(np.maximum(conv2d_same(x, w), 0.0))
    return x


def read_vgf(path, view: Optional[int] = None) -> np.ndarray:
    """All fields as (n_views, H, W, d) float32, or a single view if ``view`` is given."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < 20 or raw[:4] != VGF_MAGIC:
        raise LoadError(f"{path}: not a VGF1 feature container")
    n_views, hgt, wid, d = struct.unpack("<4I", raw[4:20])
    expected = 20 + 4 * n_views * hgt * wid * d
    if len(raw) != expected:
        raise LoadError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(n_views, hgt, wid, d)
    if view is None:
        return data
    if not 0 <= view < n_views:
        raise LoadError(f"{path}: view {view} out of range (file holds {n_views})")
    return data[view]


def write_vgf(path, fields: np.ndarray):
    fields = np.asarray(fields, dtype="<f4")
    if fields.ndim != 4:
        raise ShapeError("VGF1 fields must be (n_views, H, W, d)")
    with open(Path(path), "wb") as fh:
        fh.write(VGF_MAGIC)
        fh.write(struct.pack("<4I", *fields.shape))
        fh.write(np.ascontiguousarray(fields).tobytes())


def extract_2d(image: DepthImage, cfg: Extractor2DConfig, sample_id: Optional[str] = None,
               view: int = 0, _weights: Optional[list] = None) -> np.ndarray:
    """(H', W', d) feature field for one rendered view."""
    hgt, wid = image.size
    if cfg.kind == "builtin-pyramid":
        if hgt < 2**cfg.levels or wid < 2**cfg.levels:
            raise ShapeError(f"image {hgt}x{wid} too small for {cfg.levels} pooling levels")
        weights = _weights if _weights is not None else pyramid_weights(cfg.channels, cfg.levels, cfg.seed)
        return pyramid_forward(normalize_depth(image), weights)
    path = Path(cfg.path)
    if path.is_dir():
        if sample_id is None:
            raise LoadError("external features stored per sample need a sample id")
        path = path / f"{sample_id}.vgf"
    field = np.asarray(read_vgf(path, view), dtype=np.float64)
    fh, fw = field.shape[:2]
    if hgt % fh or wid % fw:
        raise LoadError(f"{path}: feature field {fh}x{fw} does not tile image {hgt}x{wid}")
    return field
