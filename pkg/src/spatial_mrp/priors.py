"""Hyperprior and fixed-effect log densities.

Log densities are given on the natural scale; the ``*_logtau`` / ``*_logit``
variants include the Jacobian for the unconstrained coordinates used by the
optimiser and samplers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import expit

from .gmrf import ScaledStructure

FIXED_EFFECT_VARIANCE = 1000.0
OVERDISPERSION_LOGIT_PRECISION = 0.4


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class PcPrecisionSpec:
    """PC prior on a precision tau through ``P(sigma > u) = a``."""

    u: float = 0.5
    a: float = 0.1

    def __post_init__(self):
        if not self.u > 0 or not 0 < self.a < 1:
            raise PriorError(f"invalid PC precision spec u={self.u}, a={self.a}")

    @property
    def lam(self) -> float:
        return -np.log(self.a) / self.u


def pc_precision_logdensity(tau, spec: PcPrecisionSpec):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise PriorError("precision must be positive")
    lam = spec.lam
    out = np.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


def pc_precision_logdensity_logtau(log_tau, spec: PcPrecisionSpec):
    """Density of ``log(tau)``: exponential on sigma expressed in log precision."""
    log_tau = np.asarray(log_tau, dtype=float)
    lam = spec.lam
    out = np.log(lam / 2.0) - 0.5 * log_tau - lam * np.exp(-0.5 * log_tau)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PcMixingSpec:
    """PC prior on the BYM2 mixing fraction phi.

    ``lower_tail=True`` calibrates ``P(phi < u) = a``; ``False`` calibrates
    ``P(phi > u) = a`` instead.
    """

    u: float = 0.5
    a: float = 2.0 / 3.0
    lower_tail: bool = True

    def __post_init__(self):
        if not 0 < self.u < 1 or not 0 < self.a < 1:
            raise PriorError(f"invalid PC mixing spec u={self.u}, a={self.a}")


def bym2_kld(phi, inv_eigenvalues: np.ndarray):
    """KL divergence of the BYM2 field at ``phi`` from its IID base model.

    ``inv_eigenvalues`` are the reciprocals of the nonzero eigenvalues of the
    scaled structure matrix (marginal variances of the structured part along
    each constrained direction).
    """
    phi = np.asarray(phi, dtype=float)
    g = np.asarray(inv_eigenvalues, dtype=float) - 1.0
    pg = np.multiply.outer(phi, g)
    return 0.5 * np.sum(pg - np.log1p(pg), axis=-1)


def _kld_deriv(phi, g):
    pg = np.multiply.outer(phi, g)
    return 0.5 * np.sum(pg * g / (1.0 + pg), axis=-1)


class PcMixingPrior:
    """Calibrated PC density for phi on one scaled structure."""

    def __init__(self, spec: PcMixingSpec, structure: ScaledStructure | np.ndarray, tol: float = 1e-8):
        self.spec = spec
        if isinstance(structure, ScaledStructure):
            eig = structure.nonzero_eigenvalues()
        else:
            eig = np.asarray(structure, dtype=float)
        self.inv_eig = 1.0 / eig
        self._g = self.inv_eig - 1.0
        # d(phi) ~ c * phi near zero
        self._c0 = np.sqrt(0.5 * np.sum(self._g ** 2))
        self.d1 = float(self.distance(1.0))
        self.rate = self._calibrate(tol)

    def distance(self, phi):
        phi = np.asarray(phi, dtype=float)
        kld = np.maximum(bym2_kld(phi, self.inv_eig), 0.0)
        return np.sqrt(2.0 * kld)

    def distance_deriv(self, phi):
        phi = np.asarray(phi, dtype=float)
        d = self.distance(phi)
        small = d < 1e-7
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(small, self._c0, _kld_deriv(phi, self._g) / np.where(small, 1.0, d))
        return out

    def _prob_below(self, rate: float, u: float) -> float:
        du = float(self.distance(u))
        return -np.expm1(-rate * du) / -np.expm1(-rate * self.d1)

    def _calibrate(self, tol: float) -> float:
        u, a = self.spec.u, self.spec.a
        target = a if self.spec.lower_tail else 1.0 - a
        du = float(self.distance(u))
        floor = du / self.d1  # limit as rate -> 0
        if not floor < target < 1.0:
            raise PriorError(
                f"no PC rate gives P(phi < {u}) = {target:.4g}; attainable range is ({floor:.4g}, 1)"
            )
        f = lambda r: self._prob_below(r, u) - target  # noqa: E731
        lo, hi = 0.0, 1.0
        while f(hi) < 0:
            lo, hi = hi, hi * 2.0
            if hi > 1e8:
                raise PriorError("PC mixing calibration failed")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            fm = f(mid) if mid > 0 else floor - target
            if abs(fm) < tol:
                return mid
            lo, hi = (mid, hi) if fm < 0 else (lo, mid)
        raise PriorError("PC mixing calibration did not reach tolerance")

    def logdensity(self, phi):
        phi = np.asarray(phi, dtype=float)
        if np.any((phi <= 0) | (phi >= 1)):
            raise PriorError("phi must lie in (0, 1)")
        r = self.rate
        out = (np.log(r) - r * self.distance(phi) + np.log(self.distance_deriv(phi))
               - np.log(-np.expm1(-r * self.d1)))
        return float(out) if out.ndim == 0 else out

    def logdensity_logit(self, logit_phi):
        logit_phi = np.asarray(logit_phi, dtype=float)
        phi = expit(logit_phi)
        phi = np.clip(phi, 1e-15, 1 - 1e-15)
        return self.logdensity(phi) - np.logaddexp(0.0, -logit_phi) - np.logaddexp(0.0, logit_phi)

    def prob_below(self, u: float) -> float:
        return float(integrate.quad(lambda p: np.exp(self.logdensity(p)), 0, u,
                                    epsabs=1e-12, epsrel=1e-12, limit=200)[0])


def pc_mixing_logdensity(phi, spec: PcMixingSpec, structure: ScaledStructure):
    return PcMixingPrior(spec, structure).logdensity(phi)


def fixed_effect_logdensity(coef, variance: float = FIXED_EFFECT_VARIANCE):
    coef = np.asarray(coef, dtype=float)
    out = -0.5 * np.log(2 * np.pi * variance) - 0.5 * coef ** 2 / variance
    return float(out) if out.ndim == 0 else out


def overdispersion_logit_logdensity(t, precision: float = OVERDISPERSION_LOGIT_PRECISION):
    t = np.asarray(t, dtype=float)
    out = 0.5 * np.log(precision / (2 * np.pi)) - 0.5 * precision * t ** 2
    return float(out) if out.ndim == 0 else out


def overdispersion_prior_logdensity(rho, precision: float = OVERDISPERSION_LOGIT_PRECISION):
    rho = np.asarray(rho, dtype=float)
    if np.any((rho <= 0) | (rho >= 1)):
        raise PriorError("rho must lie in (0, 1)")
    t = np.log(rho) - np.log1p(-rho)
    out = overdispersion_logit_logdensity(t, precision) - np.log(rho) - np.log1p(-rho)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PriorSet:
    """Hyperprior choices for one model fit."""

    precision: PcPrecisionSpec = field(default_factory=PcPrecisionSpec)
    bym2_precision: PcPrecisionSpec = field(default_factory=lambda: PcPrecisionSpec(1.0, 0.01))
    bym2_mixing: PcMixingSpec = field(default_factory=PcMixingSpec)
    fixed_variance: float = FIXED_EFFECT_VARIANCE
    rho_logit_precision: float = OVERDISPERSION_LOGIT_PRECISION

    @classmethod
    def from_config(cls, cfg: dict | None) -> "PriorSet":
        cfg = cfg or {}
        kw = {}
        for key, kind in (("precision", PcPrecisionSpec), ("bym2_precision", PcPrecisionSpec),
                          ("bym2_mixing", PcMixingSpec)):
            if key in cfg:
                rec = dict(cfg[key])
                rec.pop("kind", None)
                kw[key] = kind(**rec)
        if "fixed_variance" in cfg:
            kw["fixed_variance"] = float(cfg["fixed_variance"])
        if "rho_logit_precision" in cfg:
            kw["rho_logit_precision"] = float(cfg["rho_logit_precision"])
        return cls(**kw)
