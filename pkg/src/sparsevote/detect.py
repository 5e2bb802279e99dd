"""Per-point anomaly scoring, normalization and thresholding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, EmptyBank, InvalidArgument, ShapeError

_CHUNK = 512
_CANDIDATES = 4


def concat_features(f3d: np.ndarray, f2d: np.ndarray) -> np.ndarray:
    f3d = np.asarray(f3d, dtype=np.float64)
    f2d = np.asarray(f2d, dtype=np.float64)
    if f2d.ndim == 2 and f2d.shape[1] == 0 and f2d.shape[0] != f3d.shape[0]:
        f2d = np.zeros((f3d.shape[0], 0))
    if f3d.ndim != 2 or f2d.ndim != 2 or f3d.shape[0] != f2d.shape[0]:
        raise ShapeError(f"cannot concatenate blocks of shape {f3d.shape} and {f2d.shape}")
    return np.hstack([f3d, f2d])


@dataclass(frozen=True)
class MemoryBank:
    rows: np.ndarray
    sources: tuple = ()

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return self.rows.shape[0]


def bank_build(nominal: Sequence[np.ndarray], subsample: float = 1.0, seed: int = 0,
               sources: Optional[Sequence[str]] = None) -> MemoryBank:
    """Stack nominal feature rows, optionally keeping a seeded random fraction."""
    if not 0 < subsample <= 1:
        raise InvalidArgument("subsample must lie in (0, 1]")
    blocks = [np.asarray(b, dtype=np.float64) for b in nominal if len(b)]
    if not blocks:
        raise EmptyBank("no nominal feature rows to build a memory bank from")
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"nominal feature widths differ: {sorted(widths)}")
    rows = np.vstack(blocks)
    if not np.all(np.isfinite(rows)):
        raise InvalidArgument("memory bank rows must be finite")
    if subsample < 1:
        m = max(1, int(round(subsample * len(rows))))
        keep = np.sort(np.random.default_rng(seed).choice(len(rows), m, replace=False))
        rows = rows[keep]
    return MemoryBank(rows, tuple(sources or ()))


def bank_score(features: np.ndarray, bank: MemoryBank) -> np.ndarray:
    """Euclidean distance from each row to its nearest bank row.

    Candidates come from the Gram-matrix expansion; the winning distance is
    recomputed from coordinate differences so exact matches score 0.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != bank.dim:
        raise ShapeError(f"features of width {x.shape[-1]} do not match bank width {bank.dim}")
    if len(bank) == 0:
        raise EmptyBank("memory bank is empty")
    b = bank.rows
    b2 = np.einsum("ij,ij->i", b, b)
    out = np.empty(x.shape[0])
    c = min(_CANDIDATES, len(b))
    for s in range(0, x.shape[0], _CHUNK):
        xs = x[s:s + _CHUNK]
        approx = b2[None, :] - 2.0 * xs @ b.T
        cand = np.argpartition(approx, c - 1, axis=1)[:, :c] if c < len(b) else np.broadcast_to(np.arange(c), approx.shape)
        diff = b[cand] - xs[:, None, :]
        out[s:s + _CHUNK] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff).min(axis=1))
    return out


def normalize_scores(raw) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant vector maps to zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise DegenerateInput("cannot normalize an empty score vector")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


def threshold_detect(norm_scores, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise InvalidArgument(f"tau must lie in [0, 1], got {tau}")
    return np.flatnonzero(np.asarray(norm_scores) > tau)


def image_score(raw) -> float:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise DegenerateInput("image score of an empty sample")
    return float(raw.max())


@dataclass
class AnomalyResult:
    sample_id: str
    raw_scores: np.ndarray
    norm_scores: np.ndarray
    threshold: float
    anomaly_set: np.ndarray
    image_score: float
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_score": float(self.image_score),
            "tau": float(self.threshold),
            "scores": [float(v) for v in self.norm_scores],
            "anomalies": [int(i) for i in self.anomaly_set],
        }


def detect(raw_scores, tau: float, sample_id: str = "") -> AnomalyResult:
    raw = np.asarray(raw_scores, dtype=np.float64)
    norm = normalize_scores(raw)
    return AnomalyResult(sample_id, raw, norm, float(tau), threshold_detect(norm, tau), image_score(raw))
