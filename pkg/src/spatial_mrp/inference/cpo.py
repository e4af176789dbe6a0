"""Conditional predictive ordinates from posterior draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..ingest import CellTable
from ..likelihood import betabinom_logpmf
from .laplace import PosteriorFit, ThetaDraws, sample_theta
from .model import LatentModel

PMF_FLOOR = 1e-300


@dataclass
class CpoResult:
    cpo: np.ndarray  # per cell, NaN where unobserved
    lcpo: float
    n_floored: int
    S: int

    @property
    def log_cpo(self) -> np.ndarray:
        return np.log(self.cpo)


def cpo_from_draws(draws: ThetaDraws, cells: CellTable) -> CpoResult:
    """Harmonic-mean identity: CPO_c = 1 / mean_s(1 / p(y_c | theta_c^(s), rho^(s)))."""
    obs = cells.observed.ravel()
    y = cells.y.ravel()[obs]
    n = cells.n.ravel()[obs]
    out = np.full(obs.size, np.nan)
    if not obs.any():
        return CpoResult(out, float("nan"), 0, draws.S)
    theta = draws.theta[:, obs]
    logp = betabinom_logpmf(y[None, :], n[None, :], theta, draws.rho[:, None])
    floor = np.log(PMF_FLOOR)
    n_floored = int(np.sum(logp < floor))
    logp = np.maximum(logp, floor)
    log_cpo = -(logsumexp(-logp, axis=0) - np.log(draws.S))
    out[obs] = np.exp(log_cpo)
    return CpoResult(out, float(-np.mean(log_cpo)), n_floored, draws.S)


def compute_cpo(fit: PosteriorFit, model: LatentModel, cells: CellTable | None = None,
                S: int = 4000, seed: int = 0) -> CpoResult:
    cells = model.cells if cells is None else cells
    draws = sample_theta(fit, model, S=S, seed=seed)
    return cpo_from_draws(draws, cells)
