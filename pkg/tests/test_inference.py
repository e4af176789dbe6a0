import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_mrp.ingest import CellTable, StrataScheme
from spatial_mrp.inference import (
    MODELS,
    FitConfig,
    FitError,
    ModelError,
    build_latent_model,
    fit,
    get_model,
    sample_theta,
)
from spatial_mrp.inference.laplace import LaplaceEngine
from spatial_mrp.inference.model import constrained_logdet

from conftest import make_cells

ALL_MODELS = sorted(MODELS)


def _random_h(model, rng):
    return model.default_hyper() + rng.normal(0, 0.7, model.n_hyper)


def test_model_roster_layouts(toy_scheme, toy_graph, toy_cells):
    I, J, K = toy_scheme.shape
    sizes = {"fixed_iid": 1 + J + K + I, "rw1_iid": 1 + J + K + I,
             "rw1_bym2": 1 + J + K + 2 * I, "bym2_edu": 1 + J + 2 * I * K}
    hypers = {"fixed_iid": 2, "rw1_iid": 3, "rw1_bym2": 4, "bym2_edu": 2 * K + 1}
    for name in ALL_MODELS:
        m = build_latent_model(name, toy_cells, toy_graph, toy_scheme)
        assert m.n_latent == sizes[name]
        assert m.n_hyper == hypers[name]
        assert m.hyper_names[-1] == "logit_rho"
    assert [MODELS[n].complexity for n in ("fixed_iid", "rw1_iid", "rw1_bym2", "bym2_edu")] == [0, 1, 2, 3]


def test_unknown_model_and_bad_inputs(toy_scheme, toy_graph, toy_cells):
    with pytest.raises(ModelError, match="unknown model"):
        get_model("car_lerouxx")
    with pytest.raises(ModelError):
        build_latent_model("rw1_bym2", toy_cells, None, toy_scheme)
    bad = CellTable("F", np.ones((2, 2, 3), int), np.zeros((2, 2, 3), int))
    with pytest.raises(ModelError):
        build_latent_model("fixed_iid", bad, toy_graph, toy_scheme)


@pytest.mark.parametrize("name", ALL_MODELS)
def test_latent_gradient_finite_difference(name, toy_scheme, toy_graph, toy_cells):
    m = build_latent_model(name, toy_cells, toy_graph, toy_scheme)
    rng = np.random.default_rng(3)
    h = _random_h(m, rng)
    x = rng.normal(0, 0.3, m.n_latent)
    f = lambda z: m.loglik(z, m.rho(h)) + m.log_latent_prior(z, h)  # noqa: E731
    _, g, H = m.latent_logpost_grad_hess(x, h)
    eps = 1e-5
    E = np.eye(m.n_latent) * eps
    fd = np.array([(f(x + e) - f(x - e)) / (2 * eps) for e in E])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5
    gfd = np.array([(m.latent_logpost_grad_hess(x + e, h)[1] - m.latent_logpost_grad_hess(x - e, h)[1])
                    / (2 * eps) for e in E])
    assert np.linalg.norm(H - gfd) / np.linalg.norm(gfd) < 1e-5


@pytest.mark.parametrize("name", ALL_MODELS)
def test_no_data_posterior_equals_prior(name, toy_scheme, toy_graph):
    # with no observations the Laplace step is exact, so log p(h | y) = log pi(h)
    m = build_latent_model(name, CellTable.empty(toy_scheme, "F"), toy_graph, toy_scheme)
    eng = LaplaceEngine(m)
    rng = np.random.default_rng(5)
    for _ in range(3):
        h = _random_h(m, rng)
        assert eng.evaluate(h).log_post == pytest.approx(m.log_hyperprior(h), abs=1e-8)


@pytest.mark.parametrize("name", ["rw1_bym2", "bym2_edu"])
def test_kappa_invariance(name, toy_scheme, toy_graph, toy_cells):
    h = None
    vals = []
    for kappa in (0.5, 1.0, 7.0):
        m = build_latent_model(name, toy_cells, toy_graph, toy_scheme, kappa=kappa)
        h = m.default_hyper() if h is None else h
        vals.append(LaplaceEngine(m).evaluate(h).log_post)
    assert np.ptp(vals) < 1e-7


def test_constrained_logdet_against_basis():
    rng = np.random.default_rng(0)
    n = 6
    L = rng.normal(size=(n, n))
    Q = L @ L.T + n * np.eye(n)
    A = rng.normal(size=(2, n))
    # orthonormal basis of the null space of A
    _, _, Vt = np.linalg.svd(A)
    B = Vt[2:].T
    assert constrained_logdet(Q, A) == pytest.approx(np.linalg.slogdet(B.T @ Q @ B)[1], rel=1e-12)


@pytest.fixture(scope="module")
def toy_fit():
    from conftest import TOY_EDGES, TOY_IDS
    from spatial_mrp.ingest import AdjacencyGraph

    g = AdjacencyGraph.from_pairs(TOY_IDS, TOY_EDGES)
    sch = StrataScheme(("a1", "a2"), ("e1", "e2", "e3"), ("F", "M"), TOY_IDS)
    cells = make_cells(sch, drop=(4,))
    m = build_latent_model("rw1_bym2", cells, g, sch)
    return m, fit(m)


def test_fit_grid_invariants(toy_fit):
    m, pf = toy_fit
    w = pf.weights
    assert abs(w.sum() - 1) < 1e-12
    assert (w >= 0).all()
    assert all(p.converged for p in pf.points)
    assert pf.diagnostics["grid"]["strategy"] in ("lattice", "axes")
    assert np.all(np.linalg.eigvalsh(pf.hessian) > 0)


def test_draws_respect_constraints_and_cover_unobserved(toy_fit):
    m, pf = toy_fit
    d = sample_theta(pf, m, S=300, seed=4, keep_latent=True)
    assert d.theta.shape == (300, m.scheme.n_cells)
    assert np.max(np.abs(d.latent @ m.A.T)) < 1e-9
    assert np.all((d.theta > 0) & (d.theta < 1))
    # county 4 is unobserved but still gets draws with spread
    th = d.theta.reshape(300, *m.scheme.shape)
    assert th[:, 4].std() > 0


def test_draws_deterministic_across_workers(toy_fit):
    m, pf = toy_fit
    a = sample_theta(pf, m, S=700, seed=11, workers=1)
    b = sample_theta(pf, m, S=700, seed=11, workers=3)
    c = sample_theta(pf, m, S=700, seed=12, workers=1)
    assert a.theta.tobytes() == b.theta.tobytes()
    assert a.theta.tobytes() != c.theta.tobytes()
    # a prefix of chunks does not depend on the total
    d = sample_theta(pf, m, S=250, seed=11)
    assert np.array_equal(d.theta, a.theta[:250])


def test_fit_deterministic(toy_scheme, toy_graph, toy_cells):
    m = build_latent_model("fixed_iid", toy_cells, toy_graph, toy_scheme)
    a, b = fit(m), fit(m)
    assert np.array_equal(a.mode, b.mode)
    assert np.array_equal(a.weights, b.weights)


def _additive_cells(sch, n_per_cell, seed):
    rng = np.random.default_rng(seed)
    I, J, K = sch.shape
    eta = (0.1 + np.linspace(-0.4, 0.4, J)[None, :, None] + np.linspace(-0.5, 0.5, K)[None, None, :]
           + np.linspace(-0.3, 0.3, I)[:, None, None])
    p = 1 / (1 + np.exp(-eta))
    n = np.full(sch.shape, n_per_cell)
    return CellTable("F", n, rng.binomial(n, p)), p


def test_more_data_narrows_posterior(toy_scheme, toy_graph):
    sds = []
    for n in (30, 480):
        cells, _ = _additive_cells(toy_scheme, n, seed=2)
        m = build_latent_model("fixed_iid", cells, toy_graph, toy_scheme)
        d = sample_theta(fit(m), m, S=1000, seed=0)
        sds.append(d.theta.std(axis=0).mean())
    assert sds[1] < 0.5 * sds[0]


def test_fit_recovers_cell_rates(toy_scheme, toy_graph):
    cells, p = _additive_cells(toy_scheme, 2000, seed=9)
    m = build_latent_model("rw1_iid", cells, toy_graph, toy_scheme)
    d = sample_theta(fit(m), m, S=500, seed=1)
    assert np.max(np.abs(d.theta.mean(0) - p.ravel())) < 0.02


def test_fit_error_on_hopeless_newton(toy_scheme, toy_graph, toy_cells):
    m = build_latent_model("fixed_iid", toy_cells, toy_graph, toy_scheme)
    with pytest.raises(FitError) as exc:
        fit(m, FitConfig(newton_maxiter=1, newton_tol=1e-30, retries=0))
    assert "model" in exc.value.diagnostics


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_prior_precision_block_quadratic_consistent(seed):
    # the per-block quadratic forms add up to x' P x
    from conftest import TOY_EDGES, TOY_IDS
    from spatial_mrp.ingest import AdjacencyGraph

    g = AdjacencyGraph.from_pairs(TOY_IDS, TOY_EDGES)
    sch = StrataScheme(("a1", "a2"), ("e1", "e2", "e3"), ("F", "M"), TOY_IDS)
    rng = np.random.default_rng(seed)
    for name in ALL_MODELS:
        m = build_latent_model(name, CellTable.empty(sch, "F"), g, sch)
        h = _random_h(m, rng)
        x = rng.normal(size=m.n_latent)
        total = sum(m.block_quadratic(b, x[b.slice], h) for b in m.blocks)
        assert total == pytest.approx(x @ m.prior_precision(h) @ x, rel=1e-10)


def test_integration_setting_validated():
    with pytest.raises(ValueError, match="integration"):
        FitConfig(integration="quadrature")
    with pytest.raises(ValueError, match="unknown fit settings"):
        FitConfig.from_dict({"grid_stepp": 1.0})


@pytest.fixture(scope="module")
def rw1_iid_fits():
    from conftest import TOY_EDGES, TOY_IDS
    from spatial_mrp.ingest import AdjacencyGraph

    g = AdjacencyGraph.from_pairs(TOY_IDS, TOY_EDGES)
    sch = StrataScheme(("a1", "a2"), ("e1", "e2", "e3"), ("F", "M"), TOY_IDS)
    cells, _ = _additive_cells(sch, 40, seed=6)
    m = build_latent_model("rw1_iid", cells, g, sch)
    return m, fit(m, FitConfig(integration="grid")), fit(m, FitConfig(integration="importance"))


def test_importance_matches_grid(rw1_iid_fits):
    # both integrate the same Laplace marginal, so cell posteriors agree
    m, grid, imp = rw1_iid_fits
    assert grid.diagnostics["grid"]["strategy"] in ("lattice", "axes")
    assert imp.diagnostics["grid"]["strategy"] == "importance"
    assert imp.diagnostics["grid"]["ess"] > 200
    assert abs(imp.weights.sum() - 1) < 1e-12
    a = sample_theta(grid, m, S=4000, seed=2).theta
    b = sample_theta(imp, m, S=4000, seed=2).theta
    assert np.max(np.abs(a.mean(0) - b.mean(0))) < 0.01
    assert np.max(np.abs(a.std(0) / b.std(0) - 1)) < 0.15


def test_importance_deterministic(rw1_iid_fits):
    m, _, imp = rw1_iid_fits
    again = fit(m, FitConfig(integration="importance"))
    assert np.array_equal(imp.weights, again.weights)
    assert np.array_equal(imp.hyper_grid(), again.hyper_grid())


def test_auto_integration_by_dimension(toy_scheme, toy_graph, toy_cells):
    m = build_latent_model("bym2_edu", toy_cells, toy_graph, toy_scheme)
    pf = fit(m, FitConfig(is_pilot=200, is_draws=400))
    assert m.n_hyper > FitConfig().grid_max_dim
    assert pf.diagnostics["grid"]["strategy"] == "importance"
    assert all(np.all(np.abs(p.h - pf.mode) <= FitConfig().is_box + 1e-9) for p in pf.points)
