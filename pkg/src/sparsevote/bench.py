"""Voting convolution vs dense oracle: vote counts and wall time by occupancy."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import SparseVoxelGrid
from .errors import InvalidArgument
from .sparse_conv import ConvKernel3D, VoteCounter, dense_conv_oracle, voting_conv

HEADER = ("size", "occupancy", "occupied", "votes", "voting_time", "dense_time")


@dataclass(frozen=True)
class BenchRow:
    size: int
    occupancy: float
    occupied: int
    votes: int
    voting_time: float
    dense_time: float

    @property
    def ratio(self) -> float:
        return self.voting_time / self.dense_time if self.dense_time > 0 else float("inf")

    def as_tuple(self) -> tuple:
        return (self.size, self.occupancy, self.occupied, self.votes, self.voting_time, self.dense_time)


def random_grid(size: int, occupancy: float, channels: int, rng: np.random.Generator) -> SparseVoxelGrid:
    n = max(1, int(round(occupancy * size**3)))
    flat = rng.choice(size**3, n, replace=False)
    coords = np.column_stack(np.unravel_index(flat, (size,) * 3))
    feats = rng.uniform(0.5, 1.5, (n, channels)) * rng.choice([-1.0, 1.0], (n, channels))
    return SparseVoxelGrid(coords, feats, channels)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_sparse(grid_sizes: Sequence[int], occupancies: Sequence[float], kernel=(3, 3, 3),
                 channels=(8, 8), repeats: int = 5, seed: int = 0, timing: bool = True) -> list[BenchRow]:
    """One row per (size, occupancy); times are medians over ``repeats`` runs.

    Both operators see the same cells: the dense oracle runs on the grid's
    cube padded by the kernel half-width so nothing is clipped.
    """
    if repeats < 1:
        raise InvalidArgument("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    c_in, c_out = channels
    k = ConvKernel3D.random(tuple(kernel) + (c_in, c_out), rng)
    half = np.array(kernel) // 2
    rows = []
    for size in grid_sizes:
        for occ in occupancies:
            if not 0 < occ <= 1:
                raise InvalidArgument(f"occupancy must lie in (0, 1], got {occ}")
            grid = random_grid(int(size), float(occ), c_in, rng)
            counter = VoteCounter()
            voting_conv(grid, k, counter=counter)
            vt = dt = 0.0
            if timing:
                dense = grid.to_dense(-half, np.full(3, size) + 2 * half)
                vt = _median_time(lambda: voting_conv(grid, k), repeats)
                dt = _median_time(lambda: dense_conv_oracle(dense, k), repeats)
            rows.append(BenchRow(int(size), float(occ), len(grid), counter.votes, vt, dt))
    return rows
