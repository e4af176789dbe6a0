"""Model roster and compilation of a model into a latent Gaussian model."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .. import gmrf
from ..ingest import AdjacencyGraph, CellTable, StrataScheme
from ..likelihood import LinearPredictorMap, _log_choose, betabinom_eta_derivs, betabinom_logpmf_eta_sum
from ..priors import (
    PcMixingPrior,
    PriorSet,
    overdispersion_logit_logdensity,
    pc_precision_logdensity_logtau,
)

LOG_2PI = np.log(2 * np.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    name: str
    edu_term: str  # fixed | rw1 | none
    county_term: str  # iid | bym2 | none (absorbed into the per-education BYM2)
    county_edu_term: str = "none"  # none | bym2
    description: str = ""
    complexity: int = 0
    age_term: str = "fixed"

    def __post_init__(self):
        legal = {
            ("fixed", "iid", "none"),
            ("rw1", "iid", "none"),
            ("rw1", "bym2", "none"),
            ("none", "none", "bym2"),
        }
        if (self.edu_term, self.county_term, self.county_edu_term) not in legal:
            raise ModelError(f"illegal model combination for {self.name!r}")


MODELS: dict[str, ModelSpec] = {
    m.name: m
    for m in (
        ModelSpec("fixed_iid", "fixed", "iid", "none",
                  "fixed effect on age, fixed effect on education, IID by county", 0),
        ModelSpec("rw1_iid", "rw1", "iid", "none",
                  "fixed effect on age, RW1 by education, IID by county", 1),
        ModelSpec("rw1_bym2", "rw1", "bym2", "none",
                  "fixed effect on age, RW1 by education, BYM2 by county", 2),
        ModelSpec("bym2_edu", "none", "none", "bym2",
                  "fixed effect on age, BYM2 by education", 3),
    )
}


def get_model(name: str) -> ModelSpec:
    try:
        return MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None


@dataclass(frozen=True)
class Block:
    name: str
    kind: str  # fixed | rw1 | iid | bym2
    offset: int
    size: int
    hyper: tuple[int, ...] = ()
    # rw1 / bym2: the scaled structure (for bym2 it acts on the second half)
    structure: gmrf.ScaledStructure | None = None

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.size)


@dataclass
class LatentModel:
    spec: ModelSpec
    scheme: StrataScheme
    cells: CellTable
    blocks: list[Block]
    hyper_names: list[str]
    lp_map: LinearPredictorMap
    A: np.ndarray
    priors: PriorSet
    mixing_priors: dict[int, PcMixingPrior] = field(default_factory=dict)
    kappa: float = 1.0

    # -- layout ------------------------------------------------------------
    @property
    def n_latent(self) -> int:
        return self.lp_map.n_latent

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_names)

    @property
    def n_constraints(self) -> int:
        return self.A.shape[0]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def with_cells(self, cells: CellTable) -> "LatentModel":
        if cells.shape != self.cells.shape:
            raise ModelError("cell table shape does not match the model")
        return replace(self, cells=cells)

    # -- hyperparameters ---------------------------------------------------
    def rho(self, h) -> float:
        return float(expit(h[-1]))

    def natural_hyper(self, h) -> dict[str, float]:
        out = {}
        for name, v in zip(self.hyper_names, h):
            if name.startswith("log_tau"):
                out[name.replace("log_", "")] = float(np.exp(v))
            else:
                out[name.replace("logit_", "")] = float(expit(v))
        return out

    def default_hyper(self) -> np.ndarray:
        h = []
        for name in self.hyper_names:
            if name.startswith("log_tau"):
                h.append(2.0)
            elif name.startswith("logit_phi"):
                h.append(0.0)
            else:
                h.append(-3.0)
        return np.array(h)

    def block_log_hyperprior(self, b: Block, h) -> float:
        if b.kind in ("rw1", "iid"):
            return float(pc_precision_logdensity_logtau(h[b.hyper[0]], self.priors.precision))
        if b.kind == "bym2":
            return float(pc_precision_logdensity_logtau(h[b.hyper[0]], self.priors.bym2_precision)
                         + self.mixing_priors[b.hyper[1]].logdensity_logit(h[b.hyper[1]]))
        return 0.0

    def log_hyperprior(self, h) -> float:
        total = sum(self.block_log_hyperprior(b, h) for b in self.blocks)
        total += overdispersion_logit_logdensity(h[-1], self.priors.rho_logit_precision)
        return float(total)

    # -- latent prior --------------------------------------------------------
    def block_quadratic(self, b: Block, xb, h) -> float:
        """``xb' P_b xb`` for one block of the (block diagonal) prior precision."""
        if b.kind == "fixed":
            return float(xb @ xb) / self.priors.fixed_variance
        if b.kind == "iid":
            return float(np.exp(h[b.hyper[0]]) * (xb @ xb))
        if b.kind == "rw1":
            return float(np.exp(h[b.hyper[0]]) * (xb @ _dense(b.structure) @ xb))
        tau = np.exp(h[b.hyper[0]])
        phi, one_minus = expit(h[b.hyper[1]]), expit(-h[b.hyper[1]])
        m = b.size // 2
        v, u = xb[:m], xb[m:]
        return float((tau * (v @ v) - 2.0 * np.sqrt(phi * tau) * (v @ u) + phi * (u @ u)) / one_minus
                     + u @ _dense(b.structure) @ u)

    def block_log_normalizer(self, b: Block, h) -> float:
        if b.kind == "fixed":
            return -0.5 * b.size * (LOG_2PI + np.log(self.priors.fixed_variance))
        if b.kind == "iid":
            return 0.5 * b.size * (h[b.hyper[0]] - LOG_2PI)
        if b.kind == "rw1":
            r = b.size - b.structure.constraints.shape[0]
            return 0.5 * r * (h[b.hyper[0]] - LOG_2PI) + 0.5 * _logpdet(b.structure)
        m = b.size // 2
        log_one_minus = -np.logaddexp(0.0, h[b.hyper[1]])  # log(1 - phi)
        r = m - b.structure.constraints.shape[0]
        return (0.5 * m * (h[b.hyper[0]] - log_one_minus - LOG_2PI)
                + 0.5 * (_logpdet(b.structure) - r * LOG_2PI))

    def block_log_prior(self, b: Block, x, h) -> float:
        """Latent prior plus hyperprior contribution of one block."""
        xb = np.asarray(x)[b.slice]
        return (-0.5 * self.block_quadratic(b, xb, h) + self.block_log_normalizer(b, h)
                + self.block_log_hyperprior(b, h))

    def prior_precision(self, h) -> np.ndarray:
        """Dense prior precision of the latent field (singular for intrinsic parts)."""
        n = self.n_latent
        P = np.zeros((n, n))
        for b in self.blocks:
            s = b.slice
            if b.kind == "fixed":
                P[s, s] += np.eye(b.size) / self.priors.fixed_variance
            elif b.kind == "iid":
                P[s, s] += np.exp(h[b.hyper[0]]) * np.eye(b.size)
            elif b.kind == "rw1":
                P[s, s] += np.exp(h[b.hyper[0]]) * _dense(b.structure)
            elif b.kind == "bym2":
                tau = np.exp(h[b.hyper[0]])
                phi, one_minus = expit(h[b.hyper[1]]), expit(-h[b.hyper[1]])
                m = b.size // 2
                bb = slice(b.offset, b.offset + m)
                uu = slice(b.offset + m, b.offset + b.size)
                eye = np.eye(m)
                P[bb, bb] += tau / one_minus * eye
                cross = -np.sqrt(phi * tau) / one_minus * eye
                P[bb, uu] += cross
                P[uu, bb] += cross
                P[uu, uu] += _dense(b.structure) + phi / one_minus * eye
        return P

    def prior_precision_kappa(self, h) -> np.ndarray:
        return self.prior_precision(h) + self.kappa * (self.A.T @ self.A)

    def prior_log_normalizer(self, h) -> float:
        """log of 1 / integral of exp(-x'Px/2) over {A x = 0}, in orthonormal coordinates."""
        return float(sum(self.block_log_normalizer(b, h) for b in self.blocks))

    def log_latent_prior(self, x, h, P=None) -> float:
        P = self.prior_precision(h) if P is None else P
        return float(-0.5 * x @ P @ x + self.prior_log_normalizer(h))

    # -- likelihood ----------------------------------------------------------
    def _observed(self):
        cache = self.__dict__.get("_obs")
        if cache is None:
            obs = self.cells.observed.ravel()
            M = self.lp_map.matrix()[obs]
            y = self.cells.y.ravel()[obs].astype(float)
            n = self.cells.n.ravel()[obs].astype(float)
            cache = (obs, M.tocsr(), M.T.tocsr(), y, n, _log_choose(n, y), self.lp_map.index[obs])
            self.__dict__["_obs"] = cache
        return cache

    def loglik(self, x, rho: float) -> float:
        _, _, _, y, n, lc, idx = self._observed()
        if y.size == 0:
            return 0.0
        return betabinom_logpmf_eta_sum(y, n, x[idx].sum(axis=1), rho, lc)

    def loglik_derivs(self, x, rho: float):
        """Log-likelihood, latent gradient and per-cell curvature (with the cell map)."""
        _, M, MT, y, n, _, _ = self._observed()
        if y.size == 0:
            return 0.0, np.zeros(self.n_latent), np.zeros(0), M
        lp, d1, d2 = betabinom_eta_derivs(y, n, M @ x, rho)
        return float(np.sum(lp)), MT @ d1, d2, M

    def log_joint(self, x, h) -> float:
        return self.loglik(x, self.rho(h)) + self.log_latent_prior(x, h) + self.log_hyperprior(h)

    def latent_logpost_grad_hess(self, x, h):
        """Exact gradient and Hessian of log p(y|x) + log p(x|h) in x."""
        P = self.prior_precision(h)
        ll, g, d2, M = self.loglik_derivs(x, self.rho(h))
        H = (M.T @ (M.multiply(d2[:, None]))).toarray() if d2.size else np.zeros_like(P)
        return ll + self.log_latent_prior(x, h, P), g - P @ x, H - P

    def eta(self, x) -> np.ndarray:
        return self.lp_map.eta(x)


def _dense(s: gmrf.ScaledStructure) -> np.ndarray:
    cache = s.__dict__.get("_dense")
    if cache is None:
        cache = s.scaled_Q.toarray()
        s.__dict__["_dense"] = cache
    return cache


def _logpdet(s: gmrf.ScaledStructure) -> float:
    cache = s.__dict__.get("_logpdet")
    if cache is None:
        ev = s.nonzero_eigenvalues()
        cache = float(np.sum(np.log(ev)))
        s.__dict__["_logpdet"] = cache
    return cache


def build_latent_model(spec: ModelSpec | str, cells: CellTable, graph: AdjacencyGraph | None,
                       scheme: StrataScheme, priors: PriorSet | None = None,
                       scale_rw1: bool = True, kappa: float = 1.0) -> LatentModel:
    spec = get_model(spec) if isinstance(spec, str) else spec
    priors = priors or PriorSet()
    I, J, K = scheme.shape
    if cells.shape != scheme.shape:
        raise ModelError(f"cell table shape {cells.shape} does not match scheme {scheme.shape}")
    needs_graph = "bym2" in (spec.county_term, spec.county_edu_term)
    icar = None
    if needs_graph:
        if graph is None:
            raise ModelError("BYM2 models need an adjacency graph")
        if tuple(graph.node_ids) != tuple(scheme.county_ids):
            raise ModelError("graph nodes must match the scheme's county order")
        icar = gmrf.scale_structure(gmrf.icar_precision(graph))

    blocks: list[Block] = []
    hyper: list[str] = []
    off = 0
    ii, jj, kk = np.meshgrid(np.arange(I), np.arange(J), np.arange(K), indexing="ij")
    ii, jj, kk = ii.ravel(), jj.ravel(), kk.ravel()
    cols: list[np.ndarray] = []
    terms: list[str] = []

    def add(name, kind, size, hyper_names=(), structure=None):
        nonlocal off
        hidx = []
        for hn in hyper_names:
            hidx.append(len(hyper))
            hyper.append(hn)
        blocks.append(Block(name, kind, off, size, tuple(hidx), structure))
        off += size
        return blocks[-1]

    fixed_size = 1 + J + (K if spec.edu_term == "fixed" else 0)
    b = add("fixed", "fixed", fixed_size)
    cols.append(np.full(ii.size, b.offset)); terms.append("alpha")
    cols.append(b.offset + 1 + jj); terms.append("age")
    if spec.edu_term == "fixed":
        cols.append(b.offset + 1 + J + kk); terms.append("edu")
    elif spec.edu_term == "rw1":
        rw = gmrf.rw1_precision(K)
        rw = gmrf.scale_structure(rw) if scale_rw1 else gmrf.ScaledStructure(rw, 1.0, np.ones(1), rw.Q)
        b = add("edu_rw1", "rw1", K, ("log_tau_edu",), rw)
        cols.append(b.offset + kk); terms.append("edu")

    if spec.county_term == "iid":
        b = add("county_iid", "iid", I, ("log_tau_county",))
        cols.append(b.offset + ii); terms.append("county")
    elif spec.county_term == "bym2":
        b = add("county_bym2", "bym2", 2 * I, ("log_tau_county", "logit_phi_county"), icar)
        cols.append(b.offset + ii); terms.append("county")
    if spec.county_edu_term == "bym2":
        first = None
        for k in range(K):
            b = add(f"county_bym2_edu{k + 1}", "bym2", 2 * I,
                    (f"log_tau_county_edu{k + 1}", f"logit_phi_county_edu{k + 1}"), icar)
            first = b if first is None else first
        cols.append(first.offset + kk * 2 * I + ii); terms.append("county_edu")
    hyper.append("logit_rho")

    n = off
    A_rows = []
    for b in blocks:
        if b.kind in ("rw1", "bym2"):
            C = b.structure.constraints
            start = b.offset + (b.size // 2 if b.kind == "bym2" else 0)
            for row in C:
                a = np.zeros(n)
                a[start:start + C.shape[1]] = row
                A_rows.append(a)
    A = np.array(A_rows) if A_rows else np.zeros((0, n))

    mixing = {}
    if icar is not None:
        shared = PcMixingPrior(priors.bym2_mixing, icar)
        mixing = {b.hyper[1]: shared for b in blocks if b.kind == "bym2"}
    lp_map = LinearPredictorMap(np.stack(cols, axis=1), tuple(terms), n)
    return LatentModel(spec, scheme, cells, blocks, hyper, lp_map, A, priors, mixing, kappa)


def constrained_logdet(Q0: np.ndarray, A: np.ndarray, chol=None) -> float:
    """log det of Q restricted to {A x = 0} (orthonormal basis), given Q0 = Q + kappa A'A."""
    c = sla.cho_factor(Q0, lower=True) if chol is None else chol
    ld = 2.0 * np.sum(np.log(np.diag(c[0])))
    if A.shape[0] == 0:
        return float(ld)
    W = sla.cho_solve(c, A.T)
    _, ld_aw = np.linalg.slogdet(A @ W)
    _, ld_aa = np.linalg.slogdet(A @ A.T)
    return float(ld + ld_aw - ld_aa)
