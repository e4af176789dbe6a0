import numpy as np

from spatial_mrp.inference import build_latent_model, fit, mcmc_oracle, sample_theta
from spatial_mrp.inference.mcmc import _ess

from conftest import make_cells


def test_ess_of_white_noise_near_length():
    x = np.random.default_rng(0).standard_normal((4000, 3))
    ess = _ess(x)
    assert np.all(ess > 2500) and np.all(ess <= 4000)


def test_ess_of_sticky_chain_is_small():
    x = np.repeat(np.random.default_rng(1).standard_normal(40), 100)[:, None]
    assert _ess(x)[0] < 200


def test_chain_reproducible_and_valid(toy_scheme, toy_graph, toy_cells):
    m = build_latent_model("rw1_bym2", toy_cells, toy_graph, toy_scheme)
    a = mcmc_oracle(m, iterations=300, burn_in=300, seed=5)
    b = mcmc_oracle(m, iterations=300, burn_in=300, seed=5)
    assert np.array_equal(a.theta, b.theta)
    assert a.theta.shape == (300, toy_scheme.n_cells)
    assert np.all((a.theta > 0) & (a.theta < 1)) and np.all((a.rho > 0) & (a.rho < 1))
    acc = [v for v in a.diagnostics["acceptance"].values() if v is not None]
    assert all(0 < v < 1 for v in acc)


def test_short_chain_agrees_with_laplace(toy_scheme, toy_graph):
    cells = make_cells(toy_scheme, seed=3, n_range=(150, 250))
    m = build_latent_model("fixed_iid", cells, toy_graph, toy_scheme)
    mc = mcmc_oracle(m, iterations=4000, burn_in=3000, seed=2)
    la = sample_theta(fit(m), m, S=2000, seed=0)
    assert np.max(np.abs(mc.theta.mean(0) - la.theta.mean(0))) < 0.03
