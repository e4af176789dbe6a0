"""Laplace engine posterior vs a long MCMC run on small synthetic instances.

Prints, per instance, the largest absolute gap in posterior cell means and
the largest relative gap in posterior SDs.
"""
import argparse
import time

import numpy as np

from spatial_mrp.ingest import AdjacencyGraph, CellTable, StrataScheme
from spatial_mrp.inference import build_latent_model, fit, mcmc_oracle, sample_theta

MODEL_CYCLE = ("fixed_iid", "rw1_iid", "rw1_bym2", "bym2_edu")
TOY_IDS = ("90001", "90002", "90003", "90004", "90005")
TOY_EDGES = (("90001", "90002"), ("90002", "90003"), ("90001", "90003"), ("90003", "90004"),
             ("90004", "90005"))


def instance(index: int):
    """Instance ``index``: model, graph, scheme and one sex's cell table."""
    if index % 2 == 0:
        graph = AdjacencyGraph.lattice(2, 3)
    else:
        graph = AdjacencyGraph.from_pairs(TOY_IDS, TOY_EDGES)
    scheme = StrataScheme(("a1", "a2"), ("e1", "e2", "e3"), ("F", "M"), graph.node_ids)
    I, J, K = scheme.shape
    rng = np.random.default_rng(index)
    eta = (0.2 + np.array([0.0, 0.4])[None, :, None] + np.array([-0.3, 0.0, 0.3])[None, None, :]
           + rng.normal(0, 0.4, I)[:, None, None])
    n = rng.integers(20, 60, size=(I, J, K))
    y = rng.binomial(n, 1 / (1 + np.exp(-eta)))
    return MODEL_CYCLE[index % 4], graph, scheme, CellTable("F", n, y)


def compare(index: int, S: int = 1000, iterations: int = 20000, burn_in: int = 10000):
    name, graph, scheme, cells = instance(index)
    model = build_latent_model(name, cells, graph, scheme)
    pf = fit(model)
    la = sample_theta(pf, model, S=S, seed=index)
    mc = mcmc_oracle(model, iterations=iterations, burn_in=burn_in, seed=1000 + index,
                     thin=max(iterations // S, 1))
    mean_gap = float(np.max(np.abs(la.theta.mean(0) - mc.theta.mean(0))))
    sd_gap = float(np.max(np.abs(la.theta.std(0) / mc.theta.std(0) - 1)))
    return name, mean_gap, sd_gap, mc.diagnostics["ess_min"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--iterations", type=int, default=20000)
    args = p.parse_args()
    for i in range(args.instances):
        t0 = time.perf_counter()
        name, mg, sg, ess = compare(i, iterations=args.iterations, burn_in=args.iterations // 2)
        print(f"instance {i} {name:10s} mean gap {mg:.4f} sd gap {sg:.3f} "
              f"min ESS {ess:.0f} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
