import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_mrp.ingest import AdjacencyGraph, CellTable, StrataScheme
from spatial_mrp.inference import ThetaDraws, build_latent_model, compute_cpo, cpo_from_draws, fit
from spatial_mrp.likelihood import betabinom_logpmf

from oracles import loo_log_cpo

PAIR = AdjacencyGraph.from_pairs(("00001", "00002"), [("00001", "00002")])
PAIR_SCHEME = StrataScheme(("a1", "a2"), ("e1", "e2"), ("F", "M"), PAIR.node_ids)


def two_cell(n1, y1, n2, y2):
    # one observed cell per county, both in the same age and education stratum
    n = np.zeros(PAIR_SCHEME.shape, int)
    y = n.copy()
    n[0, 0, 0], y[0, 0, 0], n[1, 0, 0], y[1, 0, 0] = n1, y1, n2, y2
    return CellTable("F", n, y)


def test_constant_draws_give_pmf():
    cells = CellTable("F", np.array([[[10, 0]]]), np.array([[[4, 0]]]))
    d = ThetaDraws(np.full((50, 2), 0.3), np.full(50, 0.05), seed=0)
    r = cpo_from_draws(d, cells)
    assert r.cpo[0] == pytest.approx(np.exp(betabinom_logpmf(4, 10, 0.3, 0.05)), rel=1e-12)
    assert np.isnan(r.cpo[1])
    assert r.lcpo == pytest.approx(-np.log(r.cpo[0]))
    assert r.n_floored == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_harmonic_mean_below_arithmetic_mean(seed):
    rng = np.random.default_rng(seed)
    cells = CellTable("F", np.array([[[12, 7]]]), np.array([[[5, 7]]]))
    d = ThetaDraws(rng.uniform(0.05, 0.95, (200, 2)), rng.uniform(0.001, 0.5, 200), seed=0)
    r = cpo_from_draws(d, cells)
    p = np.exp(betabinom_logpmf(cells.y.ravel(), cells.n.ravel(), d.theta, d.rho[:, None]))
    assert np.all(r.cpo <= p.mean(axis=0) + 1e-12)
    assert np.all(r.cpo >= p.min(axis=0) - 1e-12)


def test_unobserved_table_gives_nan():
    cells = CellTable("F", np.zeros((1, 1, 2), int), np.zeros((1, 1, 2), int))
    r = cpo_from_draws(ThetaDraws(np.full((5, 2), 0.5), np.full(5, 0.1), seed=0), cells)
    assert np.isnan(r.lcpo)


@pytest.mark.parametrize("counts", [(40, 12, 40, 15), (100, 50, 80, 41), (8, 6, 6, 2)])
def test_cpo_matches_leave_one_out_refit(counts):
    cells = two_cell(*counts)
    m = build_latent_model("fixed_iid", cells, PAIR, PAIR_SCHEME)
    r = compute_cpo(fit(m), m, S=20000, seed=1)
    for c in (0, 4):
        loo = np.exp(loo_log_cpo("fixed_iid", cells, PAIR, PAIR_SCHEME, c, S=20000, seed=2))
        assert abs(r.cpo[c] - loo) < 0.01
