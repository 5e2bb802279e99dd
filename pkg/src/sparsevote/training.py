"""Full-batch gradient descent on small proxy tasks.

Two tasks exercise the hand-written gradients:

* ``sparse``: per-cell occupancy denoising. A voxelized shape is corrupted by
  random clutter cells; a stack of voting convolutions regresses 1 on shape
  cells and 0 elsewhere. The L1 activation penalty applies to every layer.
* ``graph``: per-point anomaly regression on a small synthetic scan with a
  graph network and MLP head.

Both use a fixed step and a fixed iteration count so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import PointCloud, SparseVoxelGrid
from .errors import ConfigError, TrainingDiverged
from .graph_net import (
    GraphLayerParams,
    GraphNet,
    MlpParams,
    build_graph,
    graph_net_backward,
    graph_net_forward,
    normalize_adjacency,
)
from .sparse_conv import ConvKernel3D, sparse_net_backward, sparse_net_forward
from .synthetic import SyntheticSpec, generate_synthetic

DIVERGENCE = 1e6


@dataclass(frozen=True)
class ProxyConfig:
    task: str = "sparse"
    channels: tuple = (1, 8, 8, 1)  # sparse task: per-layer widths
    kernel: int = 3
    hidden: int = 16  # graph task width
    graph_layers: int = 2
    k: int = 8
    iters: int = 150
    step: float = 0.05
    lam: float = 0.0
    seed: int = 0
    grid: int = 16
    clutter: float = 0.03  # fraction of grid cells added as noise
    final_relu: bool = True

    def __post_init__(self):
        if self.task not in ("sparse", "graph"):
            raise ConfigError(f"unknown proxy task {self.task!r}")
        if self.iters < 0 or self.step <= 0 or self.lam < 0:
            raise ConfigError("iters must be >= 0, step > 0 and lam >= 0")
        if len(self.channels) < 2 or self.kernel % 2 == 0:
            raise ConfigError("need at least one layer and an odd kernel size")


@dataclass
class ProxyResult:
    params: object  # list[ConvKernel3D] or GraphNet
    init: object
    loss: list = field(default_factory=list)  # objective per iteration (before the step) plus final
    sparsity: list = field(default_factory=list)  # per iteration: zero-activation fraction per layer

    @property
    def final_sparsity(self) -> list:
        return self.sparsity[-1] if self.sparsity else []

    @property
    def intermediate_sparsity(self) -> float:
        """Mean zero-activation fraction over all layers but the last, at the end of training."""
        s = self.final_sparsity
        inner = s[:-1] if len(s) > 1 else s
        return float(np.mean(inner)) if inner else 0.0


def denoising_task(size: int, clutter: float, seed: int) -> tuple[SparseVoxelGrid, SparseVoxelGrid]:
    """(noisy input, clean target) occupancy grids: a hollow ball shell plus random clutter."""
    rng = np.random.default_rng(seed)
    idx = np.indices((size,) * 3).reshape(3, -1).T
    c = (size - 1) / 2.0 + rng.uniform(-1, 1, 3)
    r = np.linalg.norm(idx - c, axis=1)
    radius = size * rng.uniform(0.25, 0.35)
    clean = np.abs(r - radius) < 0.9
    noise = rng.random(idx.shape[0]) < clutter
    inp = clean | noise
    x = SparseVoxelGrid(idx[inp], np.ones((int(inp.sum()), 1)), 1)
    t = SparseVoxelGrid(idx[clean], np.ones((int(clean.sum()), 1)), 1)
    return x, t


def _init_kernels(cfg: ProxyConfig, rng: np.random.Generator) -> list[ConvKernel3D]:
    k = cfg.kernel
    out = []
    for a, b in zip(cfg.channels[:-1], cfg.channels[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / (k**3 * a)), (k, k, k, a, b))
        out.append(ConvKernel3D(w, np.full(b, 0.01)))
    return out


def _copy_kernels(ks: Sequence[ConvKernel3D]) -> list[ConvKernel3D]:
    return [ConvKernel3D(k.weights.copy(), k.bias.copy()) for k in ks]


def _sparse_objective(x, target, kernels, cfg):
    out, penalty, trace = sparse_net_forward(x, kernels, cfg.lam, final_relu=cfg.final_relu)
    tmap = target.cells
    pred = out.features[:, 0]
    t = np.array([1.0 if tuple(int(v) for v in c) in tmap else 0.0 for c in out.coords])
    missed = len(tmap) - int(t.sum())  # target cells the network left at zero
    n = len(x)
    loss = (float(((pred - t) ** 2).sum()) + missed + penalty) / n
    upstream = (2.0 * (pred - t))[:, None]  # gradient of n * loss; the caller divides by n
    sparsity = []
    for lt in trace.layers:
        post = np.maximum(lt.pre, 0.0) if lt.relu else lt.pre
        sparsity.append(float((post == 0).mean()) if post.size else 1.0)
    return loss, trace, upstream, sparsity


def _train_sparse(cfg: ProxyConfig) -> ProxyResult:
    rng = np.random.default_rng(cfg.seed)
    x, target = denoising_task(cfg.grid, cfg.clutter, cfg.seed)
    kernels = _init_kernels(cfg, rng)
    res = ProxyResult(kernels, _copy_kernels(kernels))
    n = len(x)
    for it in range(cfg.iters + 1):
        loss, trace, upstream, sparsity = _sparse_objective(x, target, kernels, cfg)
        if not np.isfinite(loss) or loss > DIVERGENCE:
            raise TrainingDiverged(f"sparse proxy loss {loss} at iteration {it}")
        res.loss.append(loss)
        res.sparsity.append(sparsity)
        if it == cfg.iters:
            break
        gw, gb = sparse_net_backward(trace, upstream)
        for k, dw, db in zip(kernels, gw, gb):
            k.weights -= cfg.step / n * dw
            k.bias -= cfg.step / n * db
    return res


def graph_task(side: int, seed: int, k: int) -> tuple[np.ndarray, object, np.ndarray]:
    """(node features, normalized adjacency, per-node target) from a small bumped sphere."""
    spec = SyntheticSpec(n_points=side * side, anomaly="bump", anomaly_radius=0.03, anomaly_depth=0.01,
                         noise_sigma=0.0, seed=seed)
    cloud, mask = generate_synthetic(spec)
    obj = cloud.points[:, 2] < spec.table_depth - 1e-3
    pts = cloud.points[obj]
    a_hat = normalize_adjacency(build_graph(PointCloud(pts), k))
    # height above the neighbourhood mean, and the radial offset from the object centre
    centre = pts.mean(axis=0)
    local = pts[:, 2] - a_hat @ pts[:, 2]
    radial = np.linalg.norm(pts[:, :2] - centre[:2], axis=1)
    feats = np.column_stack([local / (np.abs(local).max() + 1e-12), radial / radial.max(), np.ones(len(pts))])
    return feats, a_hat, mask[obj].astype(np.float64)


def _graph_params(net: GraphNet) -> list[np.ndarray]:
    out = []
    for layer in net.layers:
        out.append(layer.weight)
        if layer.has_bias:
            out.append(layer.bias)
    for w, b in net.mlp.layers:
        out += [w, b]
    return out


def _graph_grads(g: dict) -> list[np.ndarray]:
    out = []
    for dw, db in g["gconv"]:
        out.append(dw)
        if db is not None:
            out.append(db)
    for dw, db in g["mlp"]:
        out += [dw, db]
    return out


def _copy_net(net: GraphNet) -> GraphNet:
    layers = [GraphLayerParams(l.weight.copy(), None if l.bias is None else l.bias.copy()) for l in net.layers]
    return GraphNet(layers, MlpParams([(w.copy(), b.copy()) for w, b in net.mlp.layers]),
                    list(net.activations), net.readout)


def _gd_graph(net: GraphNet, batches: Sequence[tuple], cfg_lam: float, step: float, iters: int,
              res: ProxyResult) -> None:
    params = _graph_params(net)
    total = sum(len(t) for _, _, t in batches)
    for it in range(iters + 1):
        loss = 0.0
        grads = [np.zeros_like(p) for p in params]
        sparsity = np.zeros(len(net.layers))
        for feats, a_hat, target in batches:
            s, trace = graph_net_forward(feats, a_hat, net, per_point=True)
            loss += (float(((s - target) ** 2).sum()) + cfg_lam * trace.l1) / total
            for li, (pre, act) in enumerate(zip(trace.pre, net.activations)):
                post = np.maximum(pre, 0) if act == "relu" else pre
                sparsity[li] += float((post == 0).mean()) / len(batches)
            if it < iters:
                g = _graph_grads(graph_net_backward(trace, 2.0 * (s - target) / total, cfg_lam / total))
                for acc, gi in zip(grads, g):
                    acc += gi
        if not np.isfinite(loss) or loss > DIVERGENCE:
            raise TrainingDiverged(f"graph proxy loss {loss} at iteration {it}")
        res.loss.append(loss)
        res.sparsity.append(sparsity.tolist())
        if it == iters:
            break
        for p, g in zip(params, grads):
            p -= step * g


def _train_graph(cfg: ProxyConfig) -> ProxyResult:
    rng = np.random.default_rng(cfg.seed)
    feats, a_hat, target = graph_task(cfg.grid * 2, cfg.seed, cfg.k)
    net = GraphNet.random(feats.shape[1], cfg.hidden, cfg.graph_layers, cfg.hidden, rng)
    for layer in net.layers:
        layer.bias = np.full(layer.weight.shape[1], 0.01)
    res = ProxyResult(net, _copy_net(net))
    _gd_graph(net, [(feats, a_hat, target)], cfg.lam, cfg.step, cfg.iters, res)
    return res


def train_proxy(cfg: ProxyConfig) -> ProxyResult:
    """Train on the configured proxy task; ``loss`` has ``iters + 1`` entries."""
    return _train_sparse(cfg) if cfg.task == "sparse" else _train_graph(cfg)


@dataclass
class GraphScorer:
    net: GraphNet
    mean: np.ndarray
    scale: np.ndarray


def _pseudo_anomaly(rows: np.ndarray, a_hat, donor: np.ndarray, rng: np.random.Generator):
    """Replace a 2-hop graph patch around a random node with donor rows plus noise."""
    n = rows.shape[0]
    seed = np.zeros(n)
    seed[rng.integers(n)] = 1.0
    patch = (a_hat @ (a_hat @ seed + seed)) > 0
    out = rows.copy()
    pick = rng.integers(donor.shape[0], size=int(patch.sum()))
    out[patch] = donor[pick] + rng.normal(0.0, 0.5, (int(patch.sum()), rows.shape[1]))
    return out, patch.astype(np.float64)


def train_graph_scorer(train_rows: Sequence[np.ndarray], graphs: Sequence, gcfg, seed: int) -> GraphScorer:
    """One-class proxy: regress 1 on synthetic feature-space patches injected into nominal samples."""
    rng = np.random.default_rng(seed)
    allrows = np.vstack(train_rows)
    mean = allrows.mean(axis=0)
    scale = allrows.std(axis=0)
    scale[scale == 0] = 1.0
    batches = []
    for i, (rows, a_hat) in enumerate(zip(train_rows, graphs)):
        z = (rows - mean) / scale
        donor = (train_rows[(i + 1) % len(train_rows)] - mean) / scale
        corrupted, target = _pseudo_anomaly(z, a_hat, donor[rng.permutation(donor.shape[0])], rng)
        batches.append((corrupted, a_hat, target))
    net = GraphNet.random(allrows.shape[1], gcfg.hidden, gcfg.layers, gcfg.hidden, rng)
    res = ProxyResult(net, None)
    _gd_graph(net, batches, 0.0, gcfg.step, gcfg.train_iters, res)
    return GraphScorer(net, mean, scale)


def graph_scores(rows: np.ndarray, a_hat, scorer: GraphScorer) -> np.ndarray:
    s, _ = graph_net_forward((rows - scorer.mean) / scorer.scale, a_hat, scorer.net, per_point=True)
    return np.asarray(s)
