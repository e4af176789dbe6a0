import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_mrp import gmrf
from spatial_mrp.ingest import AdjacencyGraph, california_graph

from conftest import path_graph, random_connected_graph
from oracles import scale_oracle


def test_icar_structure(toy_graph):
    S = gmrf.icar_precision(toy_graph)
    Q = S.dense()
    assert np.allclose(np.diag(Q), toy_graph.degree)
    assert np.allclose(Q.sum(axis=1), 0)
    assert Q[0, 1] == -1 and Q[0, 4] == 0
    assert S.constraints.shape == (1, 5)


def test_rw1_structure():
    Q = gmrf.rw1_precision(4).dense()
    expected = np.array([[1, -1, 0, 0], [-1, 2, -1, 0], [0, -1, 2, -1], [0, 0, -1, 1]])
    assert np.array_equal(Q, expected)
    with pytest.raises(gmrf.GMRFError):
        gmrf.rw1_precision(1)


def test_three_node_path_scale():
    S = gmrf.icar_precision(path_graph(3))
    # pseudo-inverse diagonal is (5/9, 2/9, 5/9)
    assert np.allclose(gmrf.constrained_inverse_diagonal(S), [5 / 9, 2 / 9, 5 / 9], atol=1e-14)
    s = gmrf.scale_structure(S).scale_s
    assert s == pytest.approx((5 / 9 * 2 / 9 * 5 / 9) ** (1 / 3), rel=1e-12)


def test_pair_scale():
    assert gmrf.scale_structure(gmrf.icar_precision(path_graph(2))).scale_s == pytest.approx(0.25)


def test_rw1_scale_matches_path_icar():
    # RW1 on K levels is the ICAR of a K-node path
    for K in (3, 6, 10):
        a = gmrf.scale_structure(gmrf.rw1_precision(K)).scale_s
        b = gmrf.scale_structure(gmrf.icar_precision(path_graph(K))).scale_s
        assert a == pytest.approx(b, rel=1e-12)


def test_scaled_geometric_mean_is_one(toy_graph):
    scaled = gmrf.scale_structure(gmrf.icar_precision(toy_graph))
    diag = gmrf.constrained_inverse_diagonal(scaled.as_structure())
    assert np.exp(np.mean(np.log(diag))) == pytest.approx(1.0, rel=1e-10)


def test_disconnected_components_scaled_separately():
    g = AdjacencyGraph(tuple(f"{i:05d}" for i in range(6)), frozenset({(0, 1), (1, 2), (3, 4)}))
    S = gmrf.icar_precision(g)
    assert S.constraints.shape == (3, 6)  # isolated node 5 has its own constraint
    scaled = gmrf.scale_structure(S)
    assert scaled.component_scales[0] == pytest.approx(0.409337, abs=1e-6)
    assert scaled.component_scales[1] == pytest.approx(0.25)
    diag = gmrf.constrained_inverse_diagonal(scaled.as_structure())
    assert diag[5] == 0
    for idx in ([0, 1, 2], [3, 4]):
        assert np.exp(np.mean(np.log(diag[idx]))) == pytest.approx(1.0, rel=1e-10)
    assert scaled.scale_s == pytest.approx(scale_oracle(S.dense(), g.components), rel=1e-10)


def test_all_isolated_rejected():
    g = AdjacencyGraph(("00001", "00002"), frozenset())
    with pytest.raises(gmrf.GMRFError):
        gmrf.scale_structure(gmrf.icar_precision(g))


def test_california_scale_positive():
    scaled = gmrf.scale_structure(gmrf.icar_precision(california_graph()))
    assert 0 < scaled.scale_s < 1
    assert scaled.nonzero_eigenvalues().min() > 1e-8


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.integers(0, 2 ** 32 - 1))
def test_scale_matches_dense_oracle(n, seed):
    g = random_connected_graph(n, np.random.default_rng(seed))
    S = gmrf.icar_precision(g)
    s = gmrf.scale_structure(S).scale_s
    assert abs(s - scale_oracle(S.dense(), g.components)) / s < 1e-8


def test_bym2_effect_endpoints():
    v, u = np.array([1.0, -2.0]), np.array([0.5, 0.5])
    assert np.allclose(gmrf.bym2_effect(v, u, 2.0, 0.0), 2 * v)
    assert np.allclose(gmrf.bym2_effect(v, u, 2.0, 1.0), 2 * u)
    with pytest.raises(gmrf.GMRFError):
        gmrf.bym2_effect(v, u, 1.0, 1.5)
    with pytest.raises(gmrf.GMRFError):
        gmrf.bym2_effect(v, u[:1], 1.0, 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_bym2_effect_variance_split(seed):
    # with independent unit-variance parts the total variance is sigma^2
    rng = np.random.default_rng(seed)
    phi, sigma = rng.uniform(), rng.uniform(0.1, 2)
    v, u = rng.standard_normal((2, 20000))
    g = gmrf.bym2_effect(v, u, sigma, phi)
    assert np.var(g) == pytest.approx(sigma ** 2, rel=0.06)


def test_constrain_kriging(toy_graph):
    S = gmrf.icar_precision(toy_graph)
    Q = S.dense() + np.eye(5) * 0.3
    x = np.random.default_rng(1).standard_normal((5, 7))
    out = gmrf.constrain(x, S.constraints, Q=Q)
    assert np.allclose(S.constraints @ out, 0, atol=1e-12)
    proj = gmrf.constrain(x, S.constraints)
    assert np.allclose(proj, x - x.mean(axis=0))
    with pytest.raises(gmrf.GMRFError):
        gmrf.constrain(x, np.zeros((1, 5)))


def test_dump_triplets(toy_graph):
    buf = io.StringIO()
    gmrf.dump_triplets(gmrf.icar_precision(toy_graph).Q, buf)
    lines = buf.getvalue().splitlines()
    assert lines[1] == "5 5 15"
    assert lines[2] == "1 1 2"
