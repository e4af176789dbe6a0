"""Laplace approximation of the latent field with hyperparameter grid integration.

Low-dimensional hyperparameter posteriors are integrated on a lattice around the
mode. Above ``FitConfig.grid_max_dim`` hyperparameters a lattice cannot reach the
long tails of weakly identified precisions, so the same Laplace marginal is
integrated by importance sampling with a split multivariate t proposal.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import optimize, stats
from scipy.special import expit

from ..gmrf import constrain
from .model import LatentModel, constrained_logdet

log = logging.getLogger(__name__)

DRAW_CHUNK = 250


class FitError(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class FitConfig:
    newton_tol: float = 1e-8
    newton_maxiter: int = 100
    outer_tol: float = 1e-6
    outer_maxiter: int = 4000
    grid_step: float = 0.75
    grid_drop: float | None = 4.0  # None: cover grid_mass of a Gaussian in d dimensions
    grid_mass: float = 0.99
    grid_max_steps: int = 12
    grid_max_points: int = 1500
    integration: str = "auto"  # "grid", "importance", or "auto" (grid up to grid_max_dim)
    grid_max_dim: int = 4
    is_pilot: int = 1000
    is_draws: int = 3000
    is_temper: float = 0.5
    is_df: float = 2.0
    is_probe: float = 2.0
    is_inflation: float = 1.25
    is_max_scale: float = 4.0
    is_defensive: float = 0.2
    is_widen: float = 2.5
    is_box: float = 12.0  # integrate over |h - mode| <= is_box in every coordinate
    hessian_step: float = 0.02
    retries: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.integration not in ("auto", "grid", "importance"):
            raise ValueError(f"unknown integration {self.integration!r}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FitConfig":
        d = d or {}
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown fit settings {sorted(bad)}")
        return cls(**d)


@dataclass
class GaussianApprox:
    """Constrained Gaussian approximation of p(x | y, h) at one hyperparameter point."""

    h: np.ndarray
    log_post: float
    mean: np.ndarray
    precision: np.ndarray  # includes kappa A'A; only its restriction to {Ax=0} matters
    chol: tuple
    iterations: int
    converged: bool
    weight: float = 0.0

    def kriging_weights(self, A):
        cache = self.__dict__.get("_W")
        if cache is None:
            cache = sla.cho_solve(self.chol, A.T)
            self.__dict__["_W"] = cache
        return cache

    def marginal_variances(self, A) -> np.ndarray:
        Sigma = sla.cho_solve(self.chol, np.eye(self.mean.size))
        if A.shape[0]:
            W = self.kriging_weights(A)
            Sigma = Sigma - W @ np.linalg.solve(A @ W, W.T)
        return np.diag(Sigma).copy()


@dataclass
class PosteriorFit:
    model_name: str
    mode: np.ndarray
    mode_log_post: float
    hessian: np.ndarray
    points: list[GaussianApprox]
    diagnostics: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.points])

    def hyper_grid(self) -> np.ndarray:
        return np.array([p.h for p in self.points])

    def latent_mean(self) -> np.ndarray:
        return np.sum([p.weight * p.mean for p in self.points], axis=0)


@dataclass
class ThetaDraws:
    theta: np.ndarray  # (S, n_cells)
    rho: np.ndarray  # (S,)
    seed: int
    latent: np.ndarray | None = None
    grid_index: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def S(self) -> int:
        return self.theta.shape[0]


class LaplaceEngine:
    """Laplace computations for one latent model; caches the last inner mode."""

    def __init__(self, model: LatentModel, config: FitConfig | None = None):
        self.model = model
        self.config = config or FitConfig()
        self.A = model.A
        self._x_warm = np.zeros(model.n_latent)
        if self.A.shape[0]:
            self._AAt_inv = np.linalg.inv(self.A @ self.A.T)
        self.n_evals = 0

    def _project_grad(self, g):
        if not self.A.shape[0]:
            return g
        return g - self.A.T @ (self._AAt_inv @ (self.A @ g))

    def inner(self, h, x0=None, exact_hessian: bool = False):
        """Conditional latent mode by constrained Newton with step halving."""
        m = self.model
        cfg = self.config
        rho = m.rho(h)
        P = m.prior_precision(h)
        P0 = P + m.kappa * (self.A.T @ self.A)
        x = (self._x_warm if x0 is None else np.asarray(x0, dtype=float)).copy()
        if self.A.shape[0]:
            x = constrain(x, self.A)

        def objective(z):
            return m.loglik(z, rho) - 0.5 * z @ P @ z

        f = objective(x)
        converged = False
        trace = [f]
        it = 0
        for it in range(1, cfg.newton_maxiter + 1):
            ll, g_ll, d2, M = m.loglik_derivs(x, rho)
            g = g_ll - P @ x
            gp = self._project_grad(g)
            if np.max(np.abs(gp)) < cfg.newton_tol:
                converged = True
                it -= 1
                break
            Q = self._posterior_precision(P0, M, d2, exact_hessian)
            chol = sla.cho_factor(Q, lower=True)
            step = sla.cho_solve(chol, g)
            if self.A.shape[0]:
                step = constrain(step, self.A, sla.cho_solve(chol, self.A.T))
            t = 1.0
            for _ in range(60):
                f_new = objective(x + t * step)
                if f_new >= f:
                    break
                t *= 0.5
            else:
                # no ascent possible at double precision: treat as converged if tiny
                converged = np.max(np.abs(gp)) < 1e-5 * (1 + abs(f))
                break
            x = x + t * step
            if self.A.shape[0]:
                x = constrain(x, self.A)
            df = f_new - f
            f = objective(x)
            trace.append(f)
            if df <= 1e-14 * (1 + abs(f)) and t * np.max(np.abs(step)) < 1e-10:
                converged = True
                break
        ll, g_ll, d2, M = m.loglik_derivs(x, rho)
        Q = self._posterior_precision(P0, M, d2, exact_hessian)
        chol = sla.cho_factor(Q, lower=True)
        return x, f, Q, chol, it, converged, trace

    @staticmethod
    def _posterior_precision(P0, M, d2, exact):
        if d2.size == 0:
            return P0.copy()
        w = -d2 if exact else np.maximum(-d2, 0.0)
        return P0 + (M.T @ M.multiply(w[:, None])).toarray()

    def evaluate(self, h, x0=None) -> GaussianApprox:
        """Laplace approximation of log p(h | y) (unnormalised) at ``h``."""
        m = self.model
        h = np.asarray(h, dtype=float)
        self.n_evals += 1
        x, f, Q, chol, it, conv, _ = self.inner(h, x0)
        if conv:
            self._x_warm = x
        n_free = m.n_latent - m.n_constraints
        log_post = (
            f
            + m.prior_log_normalizer(h)
            + 0.5 * n_free * np.log(2 * np.pi)
            - 0.5 * constrained_logdet(Q, self.A, chol)
            + m.log_hyperprior(h)
        )
        return GaussianApprox(h.copy(), float(log_post), x, Q, chol, it, bool(conv))

    def try_evaluate(self, h, x0=None) -> GaussianApprox | None:
        """``evaluate``, or None where the approximation breaks down numerically."""
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                pt = self.evaluate(h, x0)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return None
        return pt if np.isfinite(pt.log_post) else None

    def neg_log_post(self, h) -> float:
        try:
            v = self.evaluate(h).log_post
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            return np.inf
        return -v if np.isfinite(v) else np.inf


def _numerical_hessian(fun, x, step):
    n = x.size
    H = np.zeros((n, n))
    f0 = fun(x)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / step ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = step
            H[i, j] = H[j, i] = (
                fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej)
            ) / (4 * step ** 2)
    return H


def _find_mode(engine: LaplaceEngine, cfg: FitConfig, diag: dict):
    m = engine.model
    rng = np.random.default_rng(cfg.seed)
    start = m.default_hyper()
    best = None
    for attempt in range(cfg.retries + 1):
        h0 = start if attempt == 0 else start + rng.normal(scale=0.5, size=start.size)
        simplex = np.vstack([h0, h0 + np.eye(h0.size)])
        res = optimize.minimize(
            engine.neg_log_post, h0, method="Nelder-Mead",
            options=dict(xatol=cfg.outer_tol, fatol=cfg.outer_tol, maxiter=cfg.outer_maxiter,
                         maxfev=cfg.outer_maxiter * 2, initial_simplex=simplex, adaptive=h0.size > 3),
        )
        diag.setdefault("outer", []).append(
            dict(attempt=attempt, success=bool(res.success), nfev=int(res.nfev), fun=float(res.fun))
        )
        if np.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
        if res.success and np.isfinite(res.fun):
            break
    if best is None or not np.isfinite(best.fun):
        raise FitError("hyperparameter optimisation failed", diag)
    # polish: restart once from the optimum to guard against a collapsed simplex
    res = optimize.minimize(
        engine.neg_log_post, best.x, method="Nelder-Mead",
        options=dict(xatol=cfg.outer_tol, fatol=cfg.outer_tol, maxiter=cfg.outer_maxiter,
                     initial_simplex=np.vstack([best.x, best.x + 0.1 * np.eye(best.x.size)]),
                     adaptive=best.x.size > 3),
    )
    if res.fun <= best.fun:
        best = res
    diag["outer_converged"] = bool(best.success)
    return best.x


def _lattice_candidates(axis_drop, drop_max: float, max_points: int):
    """Lattice points whose additive per-axis drop estimate stays below ``drop_max``.

    Returns None once more than ``max_points`` candidates turn up.
    """
    d = len(axis_drop)
    order = [sorted(ad, key=lambda k: (abs(k), k)) for ad in axis_drop]
    out: list[tuple] = []

    def rec(a, acc, partial):
        if len(out) > max_points:
            return
        if a == d:
            out.append(tuple(acc))
            return
        for k in order[a]:
            s = partial + axis_drop[a][k]
            if s < drop_max:
                rec(a + 1, acc + [k], s)

    rec(0, [], 0.0)
    return None if len(out) > max_points else out


def grid_drop(cfg: FitConfig, d: int) -> float:
    """Log-density drop below the mode at which grid points are discarded.

    A fixed ``grid_drop`` is used as given. With ``grid_drop=None`` the threshold
    grows with the number of hyperparameters so the kept region would hold
    ``grid_mass`` of a Gaussian posterior, never below 4.
    """
    if cfg.grid_drop is not None:
        return float(cfg.grid_drop)
    return max(4.0, 0.5 * float(stats.chi2.ppf(cfg.grid_mass, d)))


def _grid(engine: LaplaceEngine, mode_pt: GaussianApprox, hess: np.ndarray, cfg: FitConfig, diag: dict):
    """Points on the standardized lattice around the mode whose log drop is below threshold.

    When the lattice at the configured step is too large, the step is widened
    (the lattice stays uniform, so weights proportional to the posterior remain
    valid); a star along the axes is the last resort.
    """
    d = mode_pt.h.size
    drop_max = grid_drop(cfg, d)
    evals, vecs = np.linalg.eigh(hess)
    evals = np.maximum(evals, 1e-2)
    to_h = vecs / np.sqrt(evals)  # h = mode + to_h @ z
    lp0 = mode_pt.log_post
    cache: dict[tuple, GaussianApprox] = {}

    def at(steps: tuple, delta: float) -> GaussianApprox | None:
        key = tuple(round(k * delta, 10) for k in steps)
        if not any(key):
            return mode_pt
        if key not in cache:
            z = np.array(steps, dtype=float) * delta
            cache[key] = engine.try_evaluate(mode_pt.h + to_h @ z, x0=mode_pt.mean)
        return cache[key]

    def drop_at(steps: tuple, delta: float) -> float:
        pt = at(steps, delta)
        return np.inf if pt is None else lp0 - pt.log_post

    def axis_drops(delta):
        out = []
        for a in range(d):
            drops = {0: 0.0}
            for sign in (1, -1):
                for k in range(1, cfg.grid_max_steps + 1):
                    drop = drop_at(tuple(sign * k if i == a else 0 for i in range(d)), delta)
                    if not np.isfinite(drop) or drop >= drop_max:
                        break
                    drops[sign * k] = max(drop, 0.0)
            out.append(drops)
        return out

    delta = cfg.grid_step
    candidates = None
    for mult in (1.0, 4 / 3, 5 / 3, 2.0, 8 / 3):
        delta = cfg.grid_step * mult
        candidates = _lattice_candidates(axis_drops(delta), drop_max, cfg.grid_max_points)
        if candidates is not None:
            break
    if candidates is None:
        strategy = "axes"
        delta = cfg.grid_step
        axis_drops(delta)
        keys = [(0,) * d] + [
            tuple(sign * k if i == a else 0 for i in range(d))
            for a in range(d) for sign in (1, -1) for k in range(1, cfg.grid_max_steps + 1)
        ]
        pts = {}
        for steps in keys:
            key = tuple(round(k * delta, 10) for k in steps)
            if (not any(key) or key in cache) and drop_at(steps, delta) < drop_max:
                pts[key] = at(steps, delta)
    else:
        strategy = "lattice"
        pts = {}
        for steps in candidates:
            if drop_at(steps, delta) < drop_max:
                pts[tuple(round(k * delta, 10) for k in steps)] = at(steps, delta)
    points = [pts[k] for k in sorted(pts)]
    diag["grid"] = dict(strategy=strategy, n_points=len(points), n_evaluated=len(cache) + 1,
                        step=float(delta), drop=drop_max)
    return points, np.array([p.log_post for p in points])


def _positive_inverse(hess: np.ndarray) -> np.ndarray:
    evals, vecs = np.linalg.eigh(hess)
    return (vecs / np.maximum(evals, 1e-2)) @ vecs.T


def _log_split_t(z: np.ndarray, scales: np.ndarray, df: float) -> np.ndarray:
    """Log density of a split t: each axis of a standard multivariate t is stretched
    by its positive or negative scale according to its sign."""
    d = scales.shape[1]
    s = np.where(z >= 0, scales[0], scales[1])
    u = z / s
    return stats.multivariate_t(loc=np.zeros(d), shape=np.eye(d), df=df).logpdf(u).reshape(-1) \
        - np.log(s).sum(axis=1)


def _importance(engine: LaplaceEngine, mode_pt: GaussianApprox, hess: np.ndarray, cfg: FitConfig,
                diag: dict):
    """Importance sampling of the Laplace hyperparameter marginal.

    The proposal is a split multivariate t in the eigen-standardised coordinates
    of the Hessian at the mode. Along each eigen-direction the positive and
    negative scales come from the log-density drop at ``is_probe`` standard
    units, so a long tail on one side gets a wider proposal on that side.
    """
    d = mode_pt.h.size
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
    zeros = np.zeros(engine.model.n_latent)
    evals, vecs = np.linalg.eigh(hess)
    to_h = vecs / np.sqrt(np.maximum(evals, 1e-2))

    def at(z):
        pt = engine.try_evaluate(mode_pt.h + to_h @ z, x0=mode_pt.mean)
        if pt is None or not pt.converged:
            pt = engine.try_evaluate(mode_pt.h + to_h @ z, x0=zeros)
        return pt if pt is not None and pt.converged else None

    # a Gaussian drops by probe^2 / 2 at probe standard units
    scales = np.empty((2, d))
    for a in range(d):
        for side, sign in enumerate((1.0, -1.0)):
            pt = at(sign * cfg.is_probe * np.eye(d)[a])
            drop = np.inf if pt is None else mode_pt.log_post - pt.log_post
            scales[side, a] = cfg.is_probe / np.sqrt(2 * drop) if drop > 0 else cfg.is_max_scale
    scales = np.clip(scales, 1.0 / cfg.is_max_scale, cfg.is_max_scale) * cfg.is_inflation
    t0 = stats.multivariate_t(loc=np.zeros(d), shape=np.eye(d), df=cfg.is_df)

    def log_q1(Z):
        # pilot: split t with a defensive widened copy that reaches joint tails
        return np.logaddexp(np.log1p(-cfg.is_defensive) + _log_split_t(Z, scales, cfg.is_df),
                            np.log(cfg.is_defensive) + _log_split_t(Z, scales * cfg.is_widen, cfg.is_df))

    def draw(n, pilot, adapted=None):
        if pilot:
            u = np.asarray(t0.rvs(size=n, random_state=rng)).reshape(n, d)
            wide = rng.random(n) < cfg.is_defensive
            return u * np.where(u >= 0, scales[0], scales[1]) * np.where(wide, cfg.is_widen, 1.0)[:, None]
        return np.asarray(adapted.rvs(size=n, random_state=rng)).reshape(n, d)

    def run(Z):
        # far outside the box the inner problem is numerically meaningless (precisions
        # overflow), so the box truncates both target and proposal
        inside = np.all(np.abs(Z @ to_h.T) <= cfg.is_box, axis=1)
        return [at(z) if keep else None for z, keep in zip(Z, inside)], inside

    Z1 = draw(cfg.is_pilot, True)
    pts1, in1 = run(Z1)
    ok1 = np.array([p is not None for p in pts1])
    if not ok1.any():
        raise FitError("importance sampling found no usable hyperparameter points", diag)
    lw1 = np.array([p.log_post for p in pts1 if p is not None]) - log_q1(Z1[ok1])
    # refit a t to the pilot; tempered weights keep a few heavy draws from collapsing it
    wt = np.exp(cfg.is_temper * (lw1 - lw1.max()))
    wt /= wt.sum()
    loc = wt @ Z1[ok1]
    C = (Z1[ok1] - loc).T @ ((Z1[ok1] - loc) * wt[:, None]) + 1e-3 * np.eye(d)
    # with df > 2 the shape below gives covariance C; heavier tails keep C as the shape
    shrink = (cfg.is_df - 2) / cfg.is_df if cfg.is_df > 2 else 1.0
    adapted = stats.multivariate_t(loc=loc, shape=0.5 * (C + C.T) * shrink, df=cfg.is_df)
    Z2 = draw(cfg.is_draws, False, adapted)
    pts2, in2 = run(Z2)
    Z = np.vstack([Z1, Z2])
    pts = pts1 + pts2
    inside = np.concatenate([in1, in2])
    ok = np.array([p is not None for p in pts])
    # every draw is weighted against the pooled mixture of both stages
    n1, n2 = cfg.is_pilot, cfg.is_draws
    log_q = np.logaddexp(np.log(n1 / (n1 + n2)) + log_q1(Z[ok]),
                         np.log(n2 / (n1 + n2)) + adapted.logpdf(Z[ok]).reshape(-1))
    logw = np.array([p.log_post for p in pts if p is not None]) - log_q
    w = np.exp(logw - logw.max())
    w /= w.sum()
    points = [p for p in pts if p is not None]
    diag["grid"] = dict(strategy="importance", n_points=len(points), n_evaluated=n1 + n2 + 2 * d + 1,
                        outside=int((~inside).sum()), failed=int((inside & ~ok).sum()),
                        ess=float(1.0 / np.sum(w ** 2)), scales=scales.tolist(), df=cfg.is_df)
    return points, logw


def fit(model: LatentModel, config: FitConfig | dict | None = None) -> PosteriorFit:
    """Mode search, Hessian, hyperparameter integration points and normalised weights."""
    cfg = config if isinstance(config, FitConfig) else FitConfig.from_dict(config)
    engine = LaplaceEngine(model, cfg)
    diag: dict = {"model": model.spec.name, "n_latent": model.n_latent,
                  "hyper_names": list(model.hyper_names),
                  "n_observed": int(model.cells.observed.sum())}
    h_star = _find_mode(engine, cfg, diag)
    mode_pt = engine.evaluate(h_star)
    if not mode_pt.converged:
        mode_pt = engine.evaluate(h_star, x0=np.zeros(model.n_latent))
    if not mode_pt.converged:
        raise FitError("inner Newton did not converge at the hyperparameter mode", diag)
    hess = -_numerical_hessian(lambda h: engine.evaluate(h, x0=mode_pt.mean).log_post,
                               h_star, cfg.hessian_step)
    hess = 0.5 * (hess + hess.T)
    use_grid = cfg.integration == "grid" or (
        cfg.integration == "auto" and model.n_hyper <= cfg.grid_max_dim)
    if use_grid:
        points, logw = _grid(engine, mode_pt, hess, cfg, diag)
        bad = [p for p in points if not p.converged]
        if bad:
            for p in bad:
                q = engine.evaluate(p.h, x0=np.zeros(model.n_latent))
                p.__dict__.update(q.__dict__)
            if any(not p.converged for p in points):
                raise FitError("inner Newton failed at some grid points", diag)
            logw = np.array([p.log_post for p in points])
    else:
        points, logw = _importance(engine, mode_pt, hess, cfg, diag)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    for p, wi in zip(points, w):
        p.weight = float(wi)
    diag.update(
        mode=h_star.tolist(),
        mode_natural=model.natural_hyper(h_star),
        mode_log_post=mode_pt.log_post,
        hyper_sd=np.sqrt(np.diag(np.linalg.pinv(hess))).tolist(),
        n_laplace_evals=engine.n_evals,
        inner_iterations_max=int(max(p.iterations for p in points)),
        all_converged=True,
    )
    return PosteriorFit(model.spec.name, h_star, mode_pt.log_post, hess, points, diag)


def _workers() -> int:
    env = os.environ.get("SPATIAL_MRP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _draw_chunk(fit: PosteriorFit, model: LatentModel, chunk: int, size: int, seed: int, keep_latent: bool):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(chunk,)))
    w = fit.weights
    idx = rng.choice(len(w), size=size, p=w)
    z = rng.standard_normal((size, model.n_latent))
    A = model.A
    X = np.empty((size, model.n_latent))
    for g in np.unique(idx):
        rows = np.flatnonzero(idx == g)
        pt = fit.points[g]
        L = pt.chol[0]
        dev = sla.solve_triangular(L, z[rows].T, lower=True, trans="T")
        x = pt.mean[:, None] + dev
        if A.shape[0]:
            x = constrain(x, A, pt.kriging_weights(A))
        X[rows] = x.T
    theta = expit(model.eta(X))
    rho = expit(np.array([fit.points[g].h[-1] for g in idx]))
    return theta, rho, idx, (X if keep_latent else None)


def sample_theta(fit: PosteriorFit, model: LatentModel, S: int = 1000, seed: int = 0,
                 keep_latent: bool = False, workers: int | None = None) -> ThetaDraws:
    """S posterior draws of every cell probability (observed or not).

    Draws are generated in fixed chunks with per-chunk RNG streams, so results
    do not depend on the number of workers.
    """
    if S < 1:
        raise ValueError("S must be >= 1")
    sizes = [min(DRAW_CHUNK, S - s) for s in range(0, S, DRAW_CHUNK)]
    workers = workers or _workers()
    job = lambda c: _draw_chunk(fit, model, c, sizes[c], seed, keep_latent)  # noqa: E731
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, range(len(sizes))))
    else:
        parts = [job(c) for c in range(len(sizes))]
    theta = np.concatenate([p[0] for p in parts])
    theta = np.clip(theta, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return ThetaDraws(
        theta=theta,
        rho=np.concatenate([p[1] for p in parts]),
        seed=seed,
        latent=np.concatenate([p[3] for p in parts]) if keep_latent else None,
        grid_index=np.concatenate([p[2] for p in parts]),
    )
