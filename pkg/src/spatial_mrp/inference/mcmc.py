"""Adaptive random-walk Metropolis-within-Gibbs sampler targeting the exact
posterior. Used to check the Laplace engine on small problems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..priors import overdispersion_logit_logdensity
from .laplace import ThetaDraws
from .model import LatentModel


@dataclass
class _Block:
    name: str
    latent: np.ndarray  # indices into x
    hyper: np.ndarray  # indices into h
    projector: np.ndarray | None  # on the latent part
    touches_lik: bool
    target_rate: float
    affected: tuple[int, ...] = ()  # model blocks whose prior terms change
    log_scale: float = 0.0
    n_prop: int = 0
    n_acc: int = 0
    # running moments for the proposal covariance
    count: int = 0
    mean: np.ndarray | None = None
    m2: np.ndarray | None = None
    chol: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.latent.size + self.hyper.size


def _projector(A_block: np.ndarray) -> np.ndarray | None:
    if A_block.shape[0] == 0 or not np.any(A_block):
        return None
    rows = A_block[np.any(A_block != 0, axis=1)]
    return np.eye(A_block.shape[1]) - rows.T @ np.linalg.solve(rows @ rows.T, rows)


def _make_blocks(model: LatentModel) -> list[_Block]:
    A = model.A
    out = []
    for b in model.blocks:
        idx = np.arange(b.offset, b.offset + b.size)
        proj = _projector(A[:, idx]) if A.shape[0] else None
        out.append(_Block(b.name, idx, np.array([], dtype=int), proj, True, 0.234 if idx.size > 1 else 0.44))
    var_h = np.array([i for i, n in enumerate(model.hyper_names) if n != "logit_rho"], dtype=int)
    if var_h.size:
        out.append(_Block("variance_hyper", np.array([], dtype=int), var_h, None, False,
                          0.234 if var_h.size > 1 else 0.44))
    out.append(_Block("rho", np.array([], dtype=int), np.array([model.n_hyper - 1]), None, True, 0.44))
    # joint move over each random-effect block and its own hyperparameters
    for b in model.blocks:
        if b.hyper:
            idx = np.arange(b.offset, b.offset + b.size)
            proj = _projector(A[:, idx]) if A.shape[0] else None
            out.append(_Block(f"{b.name}+hyper", idx, np.array(b.hyper), proj, True, 0.234))
    # everything at once; picks up the intercept / fixed-effect ridges
    all_idx = np.arange(model.n_latent)
    proj = _projector(A) if A.shape[0] else None
    out.append(_Block("joint", all_idx, np.arange(model.n_hyper), proj, True, 0.234))
    for blk in out:
        lat, hyp = set(blk.latent.tolist()), set(blk.hyper.tolist())
        blk.affected = tuple(
            i for i, b in enumerate(model.blocks)
            if lat.intersection(range(b.offset, b.offset + b.size)) or hyp.intersection(b.hyper)
        )
    return out


def _ess(x: np.ndarray) -> np.ndarray:
    """Effective sample size per column (initial positive sequence estimator)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    f = np.fft.rfft(xc, n=2 * n, axis=0)
    acov = np.fft.irfft(f * np.conj(f), axis=0)[:n] / n
    var = acov[0]
    out = np.full(x.shape[1], float(n))
    for c in range(x.shape[1]):
        if var[c] <= 0:
            continue
        rho = acov[:, c] / var[c]
        s = 0.0
        for t in range(1, n - 1, 2):
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            s += pair
        out[c] = min(n / (1.0 + 2.0 * s), n) if s > 0 else n
    return out


def mcmc_oracle(model: LatentModel, iterations: int = 20000, burn_in: int = 10000, seed: int = 0,
                thin: int = 1, x0=None, h0=None) -> ThetaDraws:
    """Run one chain; ``iterations`` post-burn-in sweeps are kept (every ``thin``-th).

    Proposal covariances and scales adapt during burn-in only.
    """
    rng = np.random.default_rng(seed)
    blocks = _make_blocks(model)
    x = np.zeros(model.n_latent) if x0 is None else np.array(x0, dtype=float)
    h = model.default_hyper() if h0 is None else np.array(h0, dtype=float)

    mblocks = model.blocks
    rho_prec = model.priors.rho_logit_precision
    terms = np.array([model.block_log_prior(b, x, h) for b in mblocks])
    cur_ll = model.loglik(x, model.rho(h))
    cur_lr = overdispersion_logit_logdensity(h[-1], rho_prec)

    for blk in blocks:
        blk.mean = np.zeros(blk.dim)
        blk.m2 = np.zeros((blk.dim, blk.dim))
        blk.chol = np.eye(blk.dim) * 0.1 / np.sqrt(blk.dim)

    kept_theta, kept_rho = [], []
    total = burn_in + iterations
    rho_idx = model.n_hyper - 1
    for it in range(total):
        adapting = it < burn_in
        for blk in blocks:
            d = blk.dim
            z = rng.standard_normal(d)
            step = np.exp(blk.log_scale) * (blk.chol @ z)
            nl = blk.latent.size
            dx, dh = step[:nl], step[nl:]
            if blk.projector is not None and nl:
                dx = blk.projector @ dx
            x_new = x
            h_new = h
            if nl:
                x_new = x.copy()
                x_new[blk.latent] += dx
            if blk.hyper.size:
                h_new = h.copy()
                h_new[blk.hyper] += dh
            new_terms = {i: model.block_log_prior(mblocks[i], x_new, h_new) for i in blk.affected}
            delta = sum(new_terms[i] - terms[i] for i in blk.affected)
            lr_new = cur_lr
            if rho_idx in blk.hyper:
                lr_new = overdispersion_logit_logdensity(h_new[-1], rho_prec)
                delta += lr_new - cur_lr
            ll_new = model.loglik(x_new, model.rho(h_new)) if blk.touches_lik else cur_ll
            log_ratio = ll_new - cur_ll + delta
            accept = np.log(rng.uniform()) < log_ratio if np.isfinite(log_ratio) else False
            blk.n_prop += 1
            if accept:
                x, h = x_new, h_new
                cur_ll, cur_lr = ll_new, lr_new
                for i, v in new_terms.items():
                    terms[i] = v
                blk.n_acc += 1
            if adapting:
                gamma = 1.0 / (1.0 + it) ** 0.6
                blk.log_scale += gamma * 3.0 * (float(accept) - blk.target_rate)
                state = np.concatenate([x[blk.latent], h[blk.hyper]])
                blk.count += 1
                delta = state - blk.mean
                blk.mean += delta / blk.count
                blk.m2 += np.outer(delta, state - blk.mean)
                if blk.count >= 200 and blk.count % 100 == 0:
                    cov = blk.m2 / (blk.count - 1)
                    cov = (2.38 ** 2 / d) * cov + 1e-8 * np.eye(d)
                    try:
                        blk.chol = np.linalg.cholesky(cov)
                        blk.log_scale = 0.0 if blk.count == 200 else blk.log_scale
                    except np.linalg.LinAlgError:
                        pass
        if it == burn_in - 1:
            for blk in blocks:
                blk.n_prop = blk.n_acc = 0
        if not adapting and (it - burn_in) % thin == 0:
            kept_theta.append(expit(model.eta(x)))
            kept_rho.append(model.rho(h))

    theta = np.clip(np.array(kept_theta), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    diag = {
        "acceptance": {b.name: (b.n_acc / b.n_prop if b.n_prop else None) for b in blocks},
        "iterations": iterations,
        "burn_in": burn_in,
        "thin": thin,
    }
    ess = _ess(theta)
    diag["ess_min"] = float(ess.min())
    diag["ess_median"] = float(np.median(ess))
    return ThetaDraws(theta=theta, rho=np.array(kept_rho), seed=seed, diagnostics=diag)
