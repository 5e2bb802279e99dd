"""Independent reference implementations and gradient-check helpers shared by the tests."""

from collections import deque

import numpy as np
from scipy.spatial.transform import Rotation

from sparsevote.core import SparseVoxelGrid
from sparsevote.graph_net import GraphNet, build_graph, graph_net_backward, graph_net_forward, normalize_adjacency
from sparsevote.sparse_conv import ConvKernel3D, sparse_net_backward, sparse_net_forward

KINK_MARGIN = 1e-3


def pairwise_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def flood_fill(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    regions = []
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                comp, q = [], deque([(i, j)])
                seen[i, j] = True
                while q:
                    a, b = q.popleft()
                    comp.append(a * w + b)
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            u, v = a + da, b + db
                            if 0 <= u < h and 0 <= v < w and mask[u, v] and not seen[u, v]:
                                seen[u, v] = True
                                q.append((u, v))
                regions.append(sorted(comp))
    return sorted(regions, key=lambda r: r[0])


def full_sweep_pro(scores, regions, negatives, limit):
    """Every unique threshold, predictions score >= t, trapezoid with interpolation at the limit."""
    pts = [(0.0, 0.0), (1.0, 1.0)]
    neg = [scores[i] for i in negatives]
    for t in sorted(set(scores.tolist())):
        fpr = sum(1 for s in neg if s >= t) / len(neg)
        pro = np.mean([sum(1 for i in r if scores[i] >= t) / len(r) for r in regions])
        pts.append((fpr, pro))
    pts.sort()
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


def surface_cloud(seed, n=600):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-0.1, 0.1, (n, 2))
    a, b, c = rng.uniform(-3, 3, 3)
    z = a * xy[:, 0] ** 2 + b * xy[:, 1] ** 2 + c * xy[:, 0] * xy[:, 1] + 0.5
    return np.column_stack([xy, z])


def random_rigid(seed):
    rng = np.random.default_rng(seed)
    return Rotation.random(random_state=seed).as_matrix(), rng.uniform(-1, 1, 3)


def random_grid(rng, size, occupancy, channels):
    n = max(1, int(round(occupancy * size**3)))
    flat = rng.choice(size**3, n, replace=False)
    coords = np.column_stack(np.unravel_index(flat, (size,) * 3))
    return SparseVoxelGrid(coords, rng.normal(size=(n, channels)), channels)


def _central_differences(arrays, grads, f, h=1e-4):
    """Worst relative error between analytic grads and central differences of ``f``."""
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-6))
    return worst


def sparse_fd_instance(seed, lam=0.05):
    """Two-layer voting net on a small grid, redrawn until every ReLU input clears the kink margin."""
    rng = np.random.default_rng(seed)
    while True:
        grid = random_grid(rng, 6, 0.05, 2)
        kernels = [ConvKernel3D.random((3, 3, 3, 2, 3), rng, bias_scale=0.2),
                   ConvKernel3D.random((3, 3, 3, 3, 2), rng, bias_scale=0.2)]
        _, _, trace = sparse_net_forward(grid, kernels, lam)
        if min(np.abs(t.pre).min() for t in trace.layers if t.relu) > KINK_MARGIN:
            return grid, kernels, lam, rng


def sparse_fd_worst(seed):
    grid, kernels, lam, rng = sparse_fd_instance(seed)
    out, _, trace = sparse_net_forward(grid, kernels, lam)
    up_by_cell = {tuple(c): rng.normal(size=2) for c in out.coords}

    def f():
        o, pen, _ = sparse_net_forward(grid, kernels, lam)
        return sum(float(up_by_cell.get(tuple(c), np.zeros(2)) @ v) for c, v in zip(o.coords, o.features)) + pen

    gw, gb = sparse_net_backward(trace, np.array([up_by_cell[tuple(c)] for c in out.coords]).reshape(-1, 2))
    arrays, grads = [], []
    for k, g_w, g_b in zip(kernels, gw, gb):
        arrays += [k.weights, k.bias]
        grads += [g_w, g_b]
    return _central_differences(arrays, grads, f)


def graph_params(net):
    out = []
    for layer in net.layers:
        out.append(layer.weight)
        if layer.has_bias:
            out.append(layer.bias)
    for w, b in net.mlp.layers:
        out += [w, b]
    return out


def graph_grads(g):
    out = []
    for dw, db in g["gconv"]:
        out.append(dw)
        if db is not None:
            out.append(db)
    for dw, db in g["mlp"]:
        out += [dw, db]
    return out


def graph_fd_worst(net, h0, a_hat, per_point, up, h=1e-4):
    def f():
        s, _ = graph_net_forward(h0, a_hat, net, per_point)
        return float(np.sum(np.asarray(s) * up))

    _, trace = graph_net_forward(h0, a_hat, net, per_point)
    return _central_differences(graph_params(net), graph_grads(graph_net_backward(trace, up)), f, h)


def kink_margin(trace):
    """Smallest |pre-activation| feeding a ReLU; finite differences need it well away from 0."""
    vals = [np.abs(p).min() for p, act in zip(trace.pre, trace.net.activations) if act == "relu"]
    x = trace.mlp_acts[0]
    for w, b in trace.net.mlp.layers[:-1]:
        pre = x @ w + b
        vals.append(np.abs(pre).min())
        x = np.maximum(pre, 0)
    return min(vals, default=np.inf)


def graph_fd_instance(seed, per_point, bias=True):
    """Seeded graph net instance, redrawn until no ReLU input lies within the kink margin."""
    rng = np.random.default_rng(seed)
    while True:
        a_hat = normalize_adjacency(build_graph(rng.normal(size=(12, 3)), k=3))
        net = GraphNet.random(4, 5, 2, 6, rng)
        if bias:
            for layer in net.layers:
                layer.bias = rng.normal(0, 0.1, layer.weight.shape[1])
        for w, b in net.mlp.layers:
            b[:] = rng.normal(0, 0.1, b.shape)
        h0 = rng.normal(size=(12, 4))
        up = rng.normal(size=12) if per_point else np.array([1.0])
        _, trace = graph_net_forward(h0, a_hat, net, per_point)
        if kink_margin(trace) > KINK_MARGIN:
            return net, h0, a_hat, up


# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: list = []


def record(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
