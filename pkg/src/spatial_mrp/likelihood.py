"""Beta-binomial observation model on the logit scale.

Overdispersion uses the intra-class correlation form: with ``s = (1 - rho) / rho``
the success probability is Beta(theta * s, (1 - theta) * s) distributed, so
``Var(y) = n theta (1 - theta) (1 + (n - 1) rho)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma, expit, gammaln, polygamma

from .ingest import CellTable

# beyond this Beta "sample size" the rising products are summed explicitly
_LARGE_S = 1e3


class LikelihoodError(ValueError):
    pass


def _rising(x: np.ndarray, k: np.ndarray, order: int = 0):
    """Differences ``f(x + k) - f(x)`` for f = lgamma, digamma, trigamma.

    Large ``x`` goes through explicit sums over ``t < k`` to avoid cancellation.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    x, k = np.broadcast_arrays(x, k)
    out = [np.empty(x.shape) for _ in range(order + 1)]
    big = x >= _LARGE_S
    sm = ~big
    if sm.any():
        xs, ks = x[sm], k[sm]
        out[0][sm] = gammaln(xs + ks) - gammaln(xs)
        if order >= 1:
            out[1][sm] = digamma(xs + ks) - digamma(xs)
        if order >= 2:
            out[2][sm] = polygamma(1, xs + ks) - polygamma(1, xs)
    if big.any():
        xb, kb = x[big], k[big]
        kmax = int(kb.max()) if kb.size else 0
        t = np.arange(kmax, dtype=float)
        mask = t[None, :] < kb[:, None]
        r = t[None, :] / xb[:, None]
        out[0][big] = np.where(mask, np.log1p(r), 0.0).sum(axis=1) + kb * np.log(xb)
        if order >= 1:
            inv = np.where(mask, 1.0 / (xb[:, None] + t[None, :]), 0.0)
            out[1][big] = inv.sum(axis=1)
            if order >= 2:
                out[2][big] = -(inv ** 2).sum(axis=1)
    return out


def _log_choose(n, y):
    return gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)


def _check(y, n, theta, rho):
    if np.any(y < 0) or np.any(y > n):
        raise LikelihoodError("need 0 <= y <= n")
    if np.any((theta <= 0) | (theta >= 1)):
        raise LikelihoodError("theta must lie in (0, 1)")
    if np.any((rho <= 0) | (rho >= 1)):
        raise LikelihoodError("rho must lie in (0, 1)")


def betabinom_logpmf(y, n, theta, rho):
    y, n, theta, rho = (np.asarray(v, dtype=float) for v in (y, n, theta, rho))
    _check(y, n, theta, rho)
    s = (1.0 - rho) / rho
    a = theta * s
    b = (1.0 - theta) * s
    (ly,) = _rising(a, y)
    (lny,) = _rising(b, n - y)
    (ln,) = _rising(s, n)
    out = _log_choose(n, y) + ly + lny - ln
    return float(out) if out.ndim == 0 else out


def betabinom_logpmf_eta_sum(y, n, eta, rho, log_choose=None) -> float:
    """Sum of log pmfs for arrays of cells given linear predictors (no derivatives)."""
    s = (1.0 - rho) / rho
    if s >= _LARGE_S:
        theta = np.clip(expit(eta), 1e-300, 1 - 1e-16)
        return float(np.sum(betabinom_logpmf(y, n, theta, rho)))
    a = np.maximum(expit(eta), 1e-300) * s
    b = np.maximum(expit(-eta), 1e-300) * s
    lc = _log_choose(n, y) if log_choose is None else log_choose
    return float(np.sum(lc + gammaln(y + a) - gammaln(a) + gammaln(n - y + b) - gammaln(b)
                        - gammaln(n + s) + gammaln(s)))


def binom_logpmf(y, n, theta):
    y, n, theta = (np.asarray(v, dtype=float) for v in (y, n, theta))
    out = _log_choose(n, y) + y * np.log(theta) + (n - y) * np.log1p(-theta)
    return float(out) if out.ndim == 0 else out


def betabinom_eta_derivs(y, n, eta, rho):
    """Log pmf and its first two derivatives in ``eta = logit(theta)``."""
    y, n, eta = (np.asarray(v, dtype=float) for v in (y, n, eta))
    theta = expit(eta)
    theta = np.clip(theta, 1e-300, 1 - 1e-16)
    s = (1.0 - rho) / rho
    a = theta * s
    b = (1.0 - theta) * s
    la, da, ta = _rising(a, y, 2)
    lb, db, tb = _rising(b, n - y, 2)
    (ln,) = _rising(s, np.broadcast_to(n, a.shape))
    logp = _log_choose(n, y) + la + lb - ln
    d_theta = s * (da - db)
    dd_theta = s * s * (ta + tb)
    w = theta * (1.0 - theta)
    d1 = d_theta * w
    d2 = dd_theta * w * w + d_theta * w * (1.0 - 2.0 * theta)
    return logp, d1, d2


@dataclass(frozen=True)
class LinearPredictorMap:
    """Latent indices selected by each cell, one column per included term.

    ``index`` has shape (n_cells, n_terms); cell c's predictor is
    ``latent[index[c]].sum()``.
    """

    index: np.ndarray
    terms: tuple[str, ...]
    n_latent: int

    def __post_init__(self):
        idx = np.asarray(self.index, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != len(self.terms):
            raise LikelihoodError("index must be (n_cells, n_terms)")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_latent):
            raise LikelihoodError("latent index out of range")
        idx.flags.writeable = False
        object.__setattr__(self, "index", idx)

    @property
    def n_cells(self) -> int:
        return self.index.shape[0]

    def matrix(self) -> sp.csr_matrix:
        cache = self.__dict__.get("_M")
        if cache is None:
            rows = np.repeat(np.arange(self.n_cells), self.index.shape[1])
            cache = sp.csr_matrix(
                (np.ones(rows.size), (rows, self.index.ravel())),
                shape=(self.n_cells, self.n_latent),
            )
            self.__dict__["_M"] = cache
        return cache

    def eta(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent)
        if latent.shape[-1] != self.n_latent:
            raise LikelihoodError(f"latent has length {latent.shape[-1]}, expected {self.n_latent}")
        return latent[..., self.index].sum(axis=-1)


def linear_predictor(model: LinearPredictorMap, latent, cell: int) -> float:
    if not 0 <= cell < model.n_cells:
        raise LikelihoodError(f"cell {cell} out of range")
    latent = np.asarray(latent, dtype=float)
    if latent.shape != (model.n_latent,):
        raise LikelihoodError(f"latent has shape {latent.shape}, expected ({model.n_latent},)")
    return float(latent[model.index[cell]].sum())


def total_loglik(cells: CellTable, model: LinearPredictorMap, latent, rho: float) -> float:
    obs = cells.observed.ravel()
    if not obs.any():
        return 0.0
    eta = model.eta(np.asarray(latent, dtype=float))[obs]
    y = cells.y.ravel()[obs]
    n = cells.n.ravel()[obs]
    theta = np.clip(expit(eta), 1e-300, 1 - 1e-16)
    # fixed summation order
    return float(np.sum(betabinom_logpmf(y, n, theta, rho)))


def total_loglik_grad(cells: CellTable, model: LinearPredictorMap, latent, rho: float):
    """Log-likelihood, gradient and (exact) Hessian with respect to the latent vector."""
    obs = cells.observed.ravel()
    M = model.matrix()[obs]
    eta = M @ np.asarray(latent, dtype=float)
    lp, d1, d2 = betabinom_eta_derivs(cells.y.ravel()[obs], cells.n.ravel()[obs], eta, rho)
    grad = M.T @ d1
    hess = (M.T @ sp.diags(d2) @ M).toarray()
    return float(np.sum(lp)), grad, hess
