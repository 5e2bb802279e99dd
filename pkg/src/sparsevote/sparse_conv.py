"""Feature-centric voting convolution over sparse voxel grids.

Every occupied input cell scatters ``feature @ W[o]`` into the output cell at
``cell + o`` for each kernel offset ``o``. Summed over all votes this is the
dense 3D convolution ``out[x] = sum_o in[x - o] @ W[o]``, but the work done
is (occupied cells) x (kernel volume) x c_in x c_out multiply-adds.

Layers alternate voting convolution (bias added only on cells that received
a vote) with a sparse ReLU that drops cells whose vector becomes zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import SparseVoxelGrid
from .errors import InvalidArgument, LoadError, ShapeError, StateError

VGK_MAGIC = b"VGK1"


@dataclass
class ConvKernel3D:
    """Weights shaped (k_x, k_y, k_z, c_in, c_out) with odd spatial sizes, plus c_out biases."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 5:
            raise ShapeError("kernel weights must be (kx, ky, kz, c_in, c_out)")
        if any(k % 2 == 0 for k in w.shape[:3]):
            raise ShapeError(f"kernel sizes must be odd, got {w.shape[:3]}")
        if not np.all(np.isfinite(w)):
            raise InvalidArgument("kernel weights must be finite")
        b = np.zeros(w.shape[4]) if self.bias is None else np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if b.shape != (w.shape[4],):
            raise ShapeError("bias length must equal c_out")
        self.weights, self.bias = w, b

    @property
    def shape(self):
        return self.weights.shape

    @property
    def c_in(self) -> int:
        return self.weights.shape[3]

    @property
    def c_out(self) -> int:
        return self.weights.shape[4]

    @property
    def volume(self) -> int:
        kx, ky, kz = self.weights.shape[:3]
        return kx * ky * kz

    def offsets(self) -> np.ndarray:
        """(volume, 3) spatial offsets in the same order as ``flat_weights``."""
        kx, ky, kz = self.weights.shape[:3]
        g = np.stack(np.meshgrid(np.arange(kx), np.arange(ky), np.arange(kz), indexing="ij"), -1).reshape(-1, 3)
        return g - np.array([kx // 2, ky // 2, kz // 2])

    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(self.volume, self.c_in, self.c_out)

    @classmethod
    def random(cls, shape, rng, scale=None, bias_scale=0.0):
        kx, ky, kz, ci, co = shape
        scale = 1.0 / np.sqrt(kx * ky * kz * ci) if scale is None else scale
        return cls(rng.normal(0, scale, shape), rng.normal(0, bias_scale, co) if bias_scale else np.zeros(co))


@dataclass
class SparseLayerOutput:
    grid: SparseVoxelGrid
    l1_value: float
    occupancy_in: int
    occupancy_out: int


@dataclass
class Rulebook:
    """Output cells of one voting pass and, per offset, the output row of each input row."""

    out_coords: np.ndarray  # (U, 3), lexicographically sorted
    targets: np.ndarray  # (volume, M) indices into out_coords

    @property
    def n_out(self) -> int:
        return self.out_coords.shape[0]


class VoteCounter:
    """Accumulates multiply-add counts of voting passes."""

    def __init__(self):
        self.votes = 0

    def add(self, n: int):
        self.votes += int(n)


def build_rulebook(coords: np.ndarray, kernel: ConvKernel3D) -> Rulebook:
    offsets = kernel.offsets()
    m = coords.shape[0]
    if m == 0:
        return Rulebook(np.zeros((0, 3), np.int64), np.zeros((len(offsets), 0), np.int64))
    half = np.abs(offsets).max(axis=0)
    lo = coords.min(axis=0) - half
    span = coords.max(axis=0) + half - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2**62:
        raise InvalidArgument("grid extent too large for packed cell keys")
    rel = (coords[None, :, :] + offsets[:, None, :]) - lo
    keys = (rel[..., 0] * span[1] + rel[..., 1]) * span[2] + rel[..., 2]
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    x, rest = np.divmod(uniq, span[1] * span[2])
    y, z = np.divmod(rest, span[2])
    out = np.column_stack([x, y, z]) + lo
    return Rulebook(out, inverse.reshape(keys.shape))


def _vote(features: np.ndarray, kernel: ConvKernel3D, book: Rulebook) -> np.ndarray:
    out = np.zeros((book.n_out, kernel.c_out))
    for w, tgt in zip(kernel.flat_weights(), book.targets):
        # a fixed offset maps distinct inputs to distinct outputs, so no index repeats here
        out[tgt] += features @ w
    return out


def voting_conv(grid: SparseVoxelGrid, kernel: ConvKernel3D, bias_mode: str = "off",
                counter: Optional[VoteCounter] = None) -> SparseVoxelGrid:
    """Sparse convolution by scatter-add voting.

    ``bias_mode="on-support"`` adds the bias to every cell that received at
    least one vote; ``"off"`` ignores it. Exactly-zero result cells are dropped.
    """
    if bias_mode not in ("off", "on-support"):
        raise InvalidArgument(f"unknown bias_mode {bias_mode!r}")
    if kernel.c_in != grid.channels:
        raise ShapeError(f"kernel expects {kernel.c_in} channels, grid has {grid.channels}")
    book = build_rulebook(grid.coords, kernel)
    if counter is not None:
        counter.add(len(grid) * kernel.volume * kernel.c_in * kernel.c_out)
    out = _vote(grid.features, kernel, book)
    if bias_mode == "on-support":
        out += kernel.bias
    return SparseVoxelGrid(book.out_coords, out, kernel.c_out, grid.origin, grid.cell_size)


def dense_conv_oracle(dense: np.ndarray, kernel: ConvKernel3D) -> np.ndarray:
    """Reference dense convolution of an (X, Y, Z, c_in) volume, zero padded, same size.

    No sparsity shortcuts: every output cell is evaluated for every offset.
    Callers pad the input by the kernel half-extent so no vote leaves the box.
    """
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim == 3:
        dense = dense[..., None]
    if dense.ndim != 4 or dense.shape[3] != kernel.c_in:
        raise ShapeError("dense input must be (X, Y, Z, c_in) matching the kernel")
    sx, sy, sz = dense.shape[:3]
    out = np.zeros((sx, sy, sz, kernel.c_out))
    for (ox, oy, oz), w in zip(kernel.offsets(), kernel.flat_weights()):
        # out[x] += in[x - o] @ W[o] where both indices are inside the box
        dst = tuple(slice(max(o, 0), s + min(o, 0)) for o, s in zip((ox, oy, oz), (sx, sy, sz)))
        src = tuple(slice(max(-o, 0), s - max(o, 0)) for o, s in zip((ox, oy, oz), (sx, sy, sz)))
        out[dst] += dense[src] @ w
    return out


def relu_sparse(grid: SparseVoxelGrid) -> SparseLayerOutput:
    feats = np.maximum(grid.features, 0.0)
    out = SparseVoxelGrid(grid.coords, feats, grid.channels, grid.origin, grid.cell_size)
    return SparseLayerOutput(out, float(out.features.sum()), len(grid), len(out))


def l1_penalty(outputs: Sequence[SparseLayerOutput], lam: float) -> float:
    if lam < 0:
        raise InvalidArgument("lambda must be non-negative")
    return lam * sum(o.l1_value for o in outputs)


@dataclass
class _LayerTrace:
    in_features: np.ndarray
    book: Rulebook
    pre: np.ndarray  # pre-activation on every support cell
    keep: np.ndarray  # support rows that survive the ReLU
    relu: bool = True


@dataclass
class ForwardTrace:
    layers: list
    lam: float
    kernels: list
    occupancy: list = field(default_factory=list)  # (input cells, support cells, output cells) per layer
    outputs: list = field(default_factory=list)  # SparseLayerOutput per layer


def sparse_net_forward(grid: SparseVoxelGrid, layers: Sequence[ConvKernel3D], lam: float = 0.0,
                       counter: Optional[VoteCounter] = None, final_relu: bool = True
                       ) -> tuple[SparseVoxelGrid, float, ForwardTrace]:
    """Stacked voting conv (bias on support) + sparse ReLU.

    Returns the final grid, ``lam`` times the summed L1 of every layer's
    activations, and a trace usable by :func:`sparse_net_backward`. With
    ``final_relu=False`` the last layer is linear and its L1 term uses |x|.
    """
    if lam < 0:
        raise InvalidArgument("lambda must be non-negative")
    trace = ForwardTrace([], lam, list(layers))
    current = grid
    for li, kernel in enumerate(layers):
        relu = final_relu or li < len(layers) - 1
        if kernel.c_in != current.channels:
            raise ShapeError(f"layer expects {kernel.c_in} channels, got {current.channels}")
        book = build_rulebook(current.coords, kernel)
        if counter is not None:
            counter.add(len(current) * kernel.volume * kernel.c_in * kernel.c_out)
        pre = _vote(current.features, kernel, book) + kernel.bias
        post = np.maximum(pre, 0.0) if relu else pre
        keep = np.flatnonzero(np.any(post != 0.0, axis=1))
        trace.layers.append(_LayerTrace(current.features, book, pre, keep, relu))
        nxt = SparseVoxelGrid(book.out_coords[keep], post[keep], kernel.c_out, current.origin, current.cell_size)
        out = SparseLayerOutput(nxt, float(np.abs(post).sum()), book.n_out, len(keep))
        trace.outputs.append(out)
        trace.occupancy.append((len(current), book.n_out, len(keep)))
        current = nxt
    return current, l1_penalty(trace.outputs, lam), trace


def sparse_net_backward(trace: Optional[ForwardTrace], upstream) -> tuple[list, list]:
    """Gradients of ``sum(upstream * output) + lam * L1`` for every kernel and bias.

    ``upstream`` is an array aligned with the final grid's cells (or a
    ``{cell: vector}`` dict). The ReLU and L1 subgradients at 0 are taken as 0.
    """
    if trace is None or not trace.layers:
        raise StateError("backward needs a retained forward trace")
    last = trace.layers[-1]
    c_out = last.pre.shape[1]
    if isinstance(upstream, dict):
        coords = last.book.out_coords[last.keep]
        lookup = {tuple(int(v) for v in c): i for i, c in enumerate(coords)}
        g = np.zeros((len(coords), c_out))
        for key, vec in upstream.items():
            i = lookup.get(tuple(int(v) for v in key))
            if i is not None:
                g[i] = vec
        upstream = g
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (len(last.keep), c_out):
        raise ShapeError(f"upstream gradient must be {(len(last.keep), c_out)}, got {upstream.shape}")
    grads_w = [None] * len(trace.layers)
    grads_b = [None] * len(trace.layers)
    g_kept = upstream
    for li in range(len(trace.layers) - 1, -1, -1):
        lt, kernel = trace.layers[li], trace.kernels[li]
        g_post = np.zeros_like(lt.pre)
        g_post[lt.keep] = g_kept
        if lt.relu:
            g_pre = (g_post + trace.lam) * (lt.pre > 0)
        else:
            g_pre = g_post + trace.lam * np.sign(lt.pre)
        dw = np.empty((kernel.volume, kernel.c_in, kernel.c_out))
        g_in = np.zeros_like(lt.in_features)
        for k, (w, tgt) in enumerate(zip(kernel.flat_weights(), lt.book.targets)):
            gk = g_pre[tgt]
            dw[k] = lt.in_features.T @ gk
            g_in += gk @ w.T
        grads_w[li] = dw.reshape(kernel.weights.shape)
        grads_b[li] = g_pre.sum(axis=0)
        g_kept = g_in
    return grads_w, grads_b


def save_params(path, layers: Sequence[tuple[np.ndarray, Optional[np.ndarray]]]):
    """Write (weights, bias) pairs to a VGK1 container.

    Layout, little-endian: ``b"VGK1"``, uint32 layer count, then per layer
    uint32 ndim, ndim x uint32 dims, the float32 weights (row-major), uint32
    bias length and the float32 bias values.
    """
    with open(Path(path), "wb") as fh:
        fh.write(VGK_MAGIC)
        fh.write(struct.pack("<I", len(layers)))
        for w, b in layers:
            w = np.asarray(w, dtype="<f4")
            b = np.zeros(0, "<f4") if b is None else np.asarray(b, dtype="<f4").reshape(-1)
            fh.write(struct.pack("<I", w.ndim))
            fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(np.ascontiguousarray(w).tobytes())
            fh.write(struct.pack("<I", b.size))
            fh.write(b.tobytes())


def load_params(path) -> list[tuple[np.ndarray, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read parameter file {path}: {exc}") from exc
    if raw[:4] != VGK_MAGIC:
        raise LoadError(f"{path}: not a VGK1 parameter container")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        layers = []
        for _ in range(count):
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            w = np.frombuffer(raw, "<f4", size, pos).reshape(dims)
            pos += 4 * size
            (blen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            b = np.frombuffer(raw, "<f4", blen, pos)
            pos += 4 * blen
            layers.append((w.astype(np.float64), b.astype(np.float64)))
    except (struct.error, ValueError) as exc:
        raise LoadError(f"{path}: truncated VGK1 container") from exc
    if pos != len(raw):
        raise LoadError(f"{path}: trailing bytes in VGK1 container")
    return layers


def save_kernels(path, kernels: Sequence[ConvKernel3D]):
    save_params(path, [(k.weights, k.bias) for k in kernels])


def load_kernels(path) -> list[ConvKernel3D]:
    return [ConvKernel3D(w, b) for w, b in load_params(path)]
