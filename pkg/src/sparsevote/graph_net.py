"""k-NN graph convolution network with an MLP scoring head.

Nodes are the valid points of a cloud. The directed k-NN relation is
symmetrized before the D^-1/2 A D^-1/2 normalization, so the propagation
matrix is always symmetric. Gradients are written out by hand; there is no
autodiff dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import PointCloud, knn_indices
from .errors import DegenerateInput, InvalidArgument, ShapeError, StateError


@dataclass(frozen=True)
class KnnGraph:
    n: int
    adjacency: sp.csr_matrix
    degree: np.ndarray


@dataclass
class GraphLayerParams:
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError("graph layer weight must be a matrix")
        if self.bias is not None:
            self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[1]:
                raise ShapeError("bias length must equal output width")
        if not np.all(np.isfinite(self.weight)):
            raise InvalidArgument("graph layer weight has non-finite entries")

    @property
    def has_bias(self) -> bool:
        return self.bias is not None


@dataclass
class MlpParams:
    """Dense layers with ReLU between them and one scalar output."""

    layers: list  # [(weight (d_in, d_out), bias (d_out,)), ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("MLP needs at least one layer")
        fixed = []
        prev = None
        for w, b in self.layers:
            w = np.array(w, dtype=np.float64)
            if w.ndim == 1:
                w = w[:, None]
            b = np.array(b, dtype=np.float64).reshape(-1)
            if b.shape[0] != w.shape[1]:
                raise ShapeError("MLP bias length must equal layer output width")
            if prev is not None and w.shape[0] != prev:
                raise ShapeError(f"MLP layer expects {w.shape[0]} inputs, previous layer gives {prev}")
            prev = w.shape[1]
            fixed.append((w, b))
        if prev != 1:
            raise ShapeError("MLP must end in a single output")
        self.layers = fixed

    @property
    def d_in(self) -> int:
        return self.layers[0][0].shape[0]

    @classmethod
    def random(cls, dims: Sequence[int], rng: np.random.Generator) -> "MlpParams":
        dims = list(dims) + ([1] if dims[-1] != 1 else [])
        return cls([(rng.normal(0, 1 / np.sqrt(a), (a, b)), np.zeros(b)) for a, b in zip(dims[:-1], dims[1:])])


def graph_from_neighbors(nbrs: np.ndarray, self_loops: bool = False) -> KnnGraph:
    """Symmetrized 0/1 adjacency from an (N, k) neighbour table."""
    nbrs = np.asarray(nbrs, dtype=np.int64)
    n, k = nbrs.shape
    rows = np.repeat(np.arange(n), k)
    directed = sp.csr_matrix((np.ones(n * k), (rows, nbrs.ravel())), shape=(n, n))
    adj = directed.maximum(directed.T).tocsr()
    adj.data[:] = 1.0
    if self_loops:
        adj = (adj + sp.identity(n, format="csr")).tocsr()
        adj.data[:] = 1.0
    adj.sort_indices()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return KnnGraph(n, adj, degree)


def build_graph(cloud, k: int = 8, self_loops: bool = False) -> KnnGraph:
    """Graph over the valid points of ``cloud`` (node i = i-th valid point)."""
    pts = cloud.valid_points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return graph_from_neighbors(knn_indices(pts, k), self_loops)


def normalize_adjacency(graph: KnnGraph) -> sp.csr_matrix:
    if graph.n == 0 or np.any(graph.degree <= 0):
        raise DegenerateInput("graph has an isolated node; cannot normalize")
    inv = 1.0 / np.sqrt(graph.degree)
    d = sp.diags(inv)
    out = (d @ graph.adjacency @ d).tocsr()
    out.sort_indices()
    return out


def _act(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "none":
        return x
    raise InvalidArgument(f"unknown activation {activation!r}")


def gconv_forward(h_prev: np.ndarray, a_hat, params: GraphLayerParams, activation: str = "relu") -> np.ndarray:
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if h_prev.ndim != 2 or h_prev.shape[1] != params.weight.shape[0]:
        raise ShapeError(f"features {h_prev.shape} incompatible with weight {params.weight.shape}")
    if a_hat.shape != (h_prev.shape[0], h_prev.shape[0]):
        raise ShapeError("propagation matrix does not match node count")
    z = a_hat @ (h_prev @ params.weight)
    if params.has_bias:
        z = z + params.bias
    return _act(np.asarray(z), activation)


def readout(h: np.ndarray, mode: str = "mean") -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] == 0:
        raise DegenerateInput("readout of an empty graph")
    if mode == "mean":
        return h.mean(axis=0)
    if mode == "max":
        return h.max(axis=0)
    raise InvalidArgument(f"unknown readout mode {mode!r}")


def _mlp_forward(x: np.ndarray, params: MlpParams) -> tuple[np.ndarray, list]:
    acts = [x]
    for li, (w, b) in enumerate(params.layers):
        x = x @ w + b
        if li < len(params.layers) - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return x[:, 0], acts


def mlp_score(x, params: MlpParams):
    """Scalar for a vector input, one score per row for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != params.d_in:
        raise ShapeError(f"MLP expects width {params.d_in}, got {x.shape}")
    out, _ = _mlp_forward(x2, params)
    return float(out[0]) if single else out


def _mlp_backward(acts: list, params: MlpParams, g_out: np.ndarray) -> tuple[list, np.ndarray]:
    g = g_out[:, None]
    grads = [None] * len(params.layers)
    for li in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[li]
        if li < len(params.layers) - 1:
            g = g * (acts[li + 1] > 0)
        grads[li] = (acts[li].T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads, g


@dataclass
class GraphNet:
    layers: list  # GraphLayerParams
    mlp: MlpParams
    activations: Optional[list] = None  # per gconv layer, default relu everywhere
    readout: str = "mean"

    def __post_init__(self):
        if self.activations is None:
            self.activations = ["relu"] * len(self.layers)
        if len(self.activations) != len(self.layers):
            raise ShapeError("one activation per graph layer")

    @classmethod
    def random(cls, d_in: int, hidden: int, n_layers: int, mlp_hidden: int, rng: np.random.Generator,
               readout: str = "mean") -> "GraphNet":
        dims = [d_in] + [hidden] * n_layers
        layers = [GraphLayerParams(rng.normal(0, 1 / np.sqrt(a), (a, b))) for a, b in zip(dims[:-1], dims[1:])]
        return cls(layers, MlpParams.random([dims[-1], mlp_hidden, 1], rng), readout=readout)


@dataclass
class GraphTrace:
    net: GraphNet
    a_hat: object
    per_point: bool
    inputs: list = field(default_factory=list)  # H^(l-1) per layer
    pre: list = field(default_factory=list)  # A_hat H W (+ b) per layer
    final: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    mlp_acts: Optional[list] = None
    l1: float = 0.0  # sum of |H^(l)| over the graph layers


def graph_net_forward(h0: np.ndarray, a_hat, net: GraphNet, per_point: bool = False):
    """Scores and trace: one graph score, or one score per node when ``per_point``."""
    trace = GraphTrace(net, a_hat, per_point)
    h = np.asarray(h0, dtype=np.float64)
    for params, act in zip(net.layers, net.activations):
        trace.inputs.append(h)
        pre = gconv_forward(h, a_hat, params, "none")
        trace.pre.append(pre)
        h = _act(pre, act)
        trace.l1 += float(np.abs(h).sum())
    trace.final = h
    if per_point:
        x = h
    else:
        trace.z = readout(h, net.readout)
        x = trace.z[None, :]
    if x.shape[1] != net.mlp.d_in:
        raise ShapeError(f"MLP expects width {net.mlp.d_in}, graph output is {x.shape[1]}")
    scores, trace.mlp_acts = _mlp_forward(x, net.mlp)
    return (scores if per_point else float(scores[0])), trace


def graph_net_backward(trace: Optional[GraphTrace], upstream, lam: float = 0.0) -> dict:
    """Gradients of ``sum(upstream * scores) + lam * trace.l1`` for every parameter.

    Returns ``{"gconv": [(dW, db or None)], "mlp": [(dW, db)]}``.
    """
    if trace is None or trace.final is None:
        raise StateError("backward needs a retained forward trace")
    net = trace.net
    g_out = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    expected = trace.final.shape[0] if trace.per_point else 1
    if g_out.shape != (expected,):
        raise ShapeError(f"upstream must have {expected} entries, got {g_out.shape}")
    mlp_grads, g_x = _mlp_backward(trace.mlp_acts, net.mlp, g_out)
    h = trace.final
    if trace.per_point:
        g_h = g_x
    elif net.readout == "mean":
        g_h = np.broadcast_to(g_x / h.shape[0], h.shape).copy()
    else:
        g_h = np.zeros_like(h)
        g_h[np.argmax(h, axis=0), np.arange(h.shape[1])] = g_x[0]
    a_t = trace.a_hat.T
    gconv = [None] * len(net.layers)
    for li in range(len(net.layers) - 1, -1, -1):
        params, pre, inp = net.layers[li], trace.pre[li], trace.inputs[li]
        if net.activations[li] == "relu":
            g_pre = (g_h + lam) * (pre > 0)
        else:
            g_pre = g_h + lam * np.sign(pre)
        g_prop = np.asarray(a_t @ g_pre)
        gconv[li] = (inp.T @ g_prop, g_pre.sum(axis=0) if params.has_bias else None)
        g_h = g_prop @ params.weight.T
    return {"gconv": gconv, "mlp": mlp_grads}
