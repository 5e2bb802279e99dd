import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from sparsevote.core import PointCloud
from sparsevote.errors import DegenerateInput, InsufficientPoints, ShapeError, StateError
from sparsevote.graph_net import (
    GraphLayerParams,
    GraphNet,
    KnnGraph,
    MlpParams,
    build_graph,
    gconv_forward,
    graph_from_neighbors,
    graph_net_backward,
    graph_net_forward,
    mlp_score,
    normalize_adjacency,
    readout,
)

from oracles import graph_fd_instance, graph_fd_worst, graph_grads


def dense_knn_adjacency(pts, k, self_loops=False):
    n = len(pts)
    d = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    a = np.zeros((n, n))
    for i in range(n):
        order = sorted((d[i, j], j) for j in range(n) if j != i)
        for _, j in order[:k]:
            a[i, j] = 1
    a = np.maximum(a, a.T)
    if self_loops:
        np.fill_diagonal(a, 1)
    return a


def test_collinear_graph():
    g = build_graph(PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0]]), k=1)
    np.testing.assert_array_equal(g.adjacency.toarray(), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    np.testing.assert_array_equal(g.degree, [1, 2, 1])


def test_complete_graph():
    pts = np.random.default_rng(0).normal(size=(6, 3))
    g = build_graph(PointCloud(pts), k=5)
    np.testing.assert_array_equal(g.adjacency.toarray(), 1 - np.eye(6))
    assert np.all(g.degree == 5)


def test_random_graph_against_dense():
    pts = np.random.default_rng(1).normal(size=(40, 3))
    for loops in (False, True):
        g = build_graph(PointCloud(pts), k=4, self_loops=loops)
        a = g.adjacency.toarray()
        np.testing.assert_array_equal(a, dense_knn_adjacency(pts, 4, loops))
        np.testing.assert_array_equal(g.degree, a.sum(axis=1))


def test_invalid_points_skipped():
    pts = np.array([[0, 0, 0], [np.nan, 0, 0], [1, 0, 0], [3, 0, 0]], float)
    assert build_graph(PointCloud(pts, grid_shape=(2, 2)), k=1).n == 3


def test_too_few_points():
    with pytest.raises(InsufficientPoints):
        build_graph(PointCloud([[0, 0, 0], [1, 0, 0]]), k=2)


def test_two_node_normalization():
    g = graph_from_neighbors(np.array([[1], [0]]))
    np.testing.assert_array_equal(normalize_adjacency(g).toarray(), [[0, 1], [1, 0]])


def test_cycle_preserves_constant():
    g = graph_from_neighbors(np.array([[1, 3], [0, 2], [1, 3], [2, 0]]))
    np.testing.assert_allclose(normalize_adjacency(g) @ np.ones(4), np.ones(4), atol=1e-15)


def test_normalization_dense_formula():
    g = build_graph(np.random.default_rng(2).normal(size=(30, 3)), k=3)
    a = g.adjacency.toarray()
    d = a.sum(1)
    ref = a / np.sqrt(np.outer(d, d))
    got = normalize_adjacency(g).toarray()
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert np.abs(got - got.T).max() == 0


def test_isolated_node_rejected():
    adj = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], float))
    with pytest.raises(DegenerateInput):
        normalize_adjacency(KnnGraph(3, adj, np.array([1.0, 1.0, 0.0])))


@pytest.mark.parametrize("n", [5, 30, 100])
def test_spectral_bound_with_self_loops(n):
    g = build_graph(np.random.default_rng(n).normal(size=(n, 3)), k=4, self_loops=True)
    ev = np.linalg.eigvalsh(normalize_adjacency(g).toarray())
    assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-9


def test_gconv_neighbor_exchange():
    a_hat = normalize_adjacency(graph_from_neighbors(np.array([[1], [0]])))
    out = gconv_forward(np.array([[1.0], [3.0]]), a_hat, GraphLayerParams(np.eye(1)), "none")
    np.testing.assert_array_equal(out, [[3.0], [1.0]])


def test_gconv_zero_weight_and_shape():
    a_hat = normalize_adjacency(build_graph(np.random.default_rng(3).normal(size=(10, 3)), k=3))
    h = np.random.default_rng(4).normal(size=(10, 4))
    assert not gconv_forward(h, a_hat, GraphLayerParams(np.zeros((4, 2)))).any()
    with pytest.raises(ShapeError):
        gconv_forward(h, a_hat, GraphLayerParams(np.zeros((3, 2))))


def test_gconv_dense_oracle():
    rng = np.random.default_rng(5)
    g = build_graph(rng.normal(size=(25, 3)), k=5)
    a_hat = normalize_adjacency(g)
    h, w = rng.normal(size=(25, 6)), rng.normal(size=(6, 4))
    np.testing.assert_allclose(gconv_forward(h, a_hat, GraphLayerParams(w)),
                               np.maximum(a_hat.toarray() @ h @ w, 0), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(15, 3))
    h = rng.normal(size=(15, 3))
    w = GraphLayerParams(rng.normal(size=(3, 4)))
    perm = rng.permutation(15)
    a = normalize_adjacency(build_graph(pts, k=3))
    ap = normalize_adjacency(build_graph(pts[perm], k=3))
    out, outp = gconv_forward(h, a, w), gconv_forward(h[perm], ap, w)
    np.testing.assert_allclose(outp, out[perm], atol=1e-12)
    np.testing.assert_allclose(readout(outp), readout(out), atol=1e-12)


def test_readout_examples():
    np.testing.assert_array_equal(readout(np.array([[1.0, 2.0], [3.0, 4.0]])), [2, 3])
    row = np.array([[0.5, -1.0]])
    assert np.array_equal(readout(row, "mean"), row[0]) and np.array_equal(readout(row, "max"), row[0])
    h = np.random.default_rng(6).normal(size=(9, 5))
    np.testing.assert_array_equal(readout(h, "max"), [max(c) for c in h.T])
    with pytest.raises(DegenerateInput):
        readout(np.zeros((0, 2)))


def test_mlp_examples():
    assert mlp_score([2.0, 3.0], MlpParams([(np.ones((2, 1)), [0.0])])) == 5.0
    p = MlpParams([(np.zeros((3, 1)), [0.7])])
    np.testing.assert_array_equal(mlp_score(np.random.default_rng(0).normal(size=(4, 3)), p), 0.7)
    with pytest.raises(ShapeError):
        MlpParams([(np.ones((2, 3)), np.zeros(3))])
    with pytest.raises(ShapeError):
        mlp_score([1.0], MlpParams([(np.ones((2, 1)), [0.0])]))







@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("per_point", [False, True])
def test_backward_finite_differences(seed, per_point):
    net, h0, a_hat, up = graph_fd_instance(seed, per_point)
    assert graph_fd_worst(net, h0, a_hat, per_point, up) < 1e-4


def test_mlp_finite_differences():
    rng = np.random.default_rng(9)
    x = rng.normal(size=4)
    while True:
        mlp = MlpParams.random([4, 6, 1], rng)
        mlp.layers[0][1][:] = rng.normal(0, 0.1, 6)
        if np.abs(x @ mlp.layers[0][0] + mlp.layers[0][1]).min() > 1e-3:
            break
    net = GraphNet([GraphLayerParams(np.eye(4))], mlp, ["none"])
    assert graph_fd_worst(net, x[None, :], sp.identity(1, format="csr"), False, np.array([1.0])) < 1e-4


def test_backward_zero_upstream():
    net, h0, a_hat, _ = graph_fd_instance(0, True)
    _, trace = graph_net_forward(h0, a_hat, net, True)
    assert all(not g.any() for g in graph_grads(graph_net_backward(trace, np.zeros(12))))


def test_backward_hand_two_node():
    # S = w_mlp * mean(A_hat H W) with A_hat the swap matrix: dS/dW = w_mlp * mean(H)
    a_hat = normalize_adjacency(graph_from_neighbors(np.array([[1], [0]])))
    h0 = np.array([[1.0, 2.0], [3.0, 5.0]])
    net = GraphNet([GraphLayerParams(np.array([[0.5], [0.25]]))], MlpParams([(np.array([[2.0]]), [0.1])]), ["none"])
    s, trace = graph_net_forward(h0, a_hat, net)
    assert s == pytest.approx(2 * (0.5 * 2 + 0.25 * 3.5) + 0.1)
    g = graph_net_backward(trace, 1.0)
    np.testing.assert_array_equal(g["gconv"][0][0], [[4.0], [7.0]])
    np.testing.assert_array_equal(g["mlp"][0][0], [[0.5 * 2 + 0.25 * 3.5]])


def test_backward_requires_trace():
    with pytest.raises(StateError):
        graph_net_backward(None, 1.0)
