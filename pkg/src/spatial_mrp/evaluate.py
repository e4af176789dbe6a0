"""Comparison against baseline counts, model ranking, and simulation studies."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import gmrf
from .ingest import AdjacencyGraph, BaselineTable, CellTable, PoststratTable, StrataScheme
from .inference import MODELS, FitConfig, build_latent_model, fit, sample_theta
from .poststrat import CountEstimates, county_counts


class EvaluateError(ValueError):
    pass


# -- baseline comparison ------------------------------------------------------

@dataclass(frozen=True)
class CountyComparison:
    county_id: str
    median: float
    lo95: float
    hi95: float
    baseline: int
    population: int
    covered: bool
    excluded: bool
    error: float
    abs_rel_error: float


@dataclass(frozen=True)
class ComparisonReport:
    sex: str
    counties: tuple[CountyComparison, ...]
    unmatched: tuple[str, ...]
    over_population: tuple[str, ...]  # baseline doses above the census population
    coverage_rate: float
    mean_abs_bias: float
    mean_signed_error: float
    n_included: int
    state: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "sex": self.sex,
            "coverage_rate": self.coverage_rate,
            "mean_abs_bias": self.mean_abs_bias,
            "mean_signed_error": self.mean_signed_error,
            "n_included": self.n_included,
            "n_excluded": sum(c.excluded for c in self.counties),
            "unmatched": list(self.unmatched),
            "over_population": list(self.over_population),
            "state": self.state,
        }


def _covers(lo, hi, value) -> bool:
    return bool(lo <= value <= hi)


def coverage_report(est: CountEstimates, baseline: BaselineTable, state: CountEstimates | None = None,
                    direct: tuple[float, float] | None = None) -> ComparisonReport:
    """Check county intervals against baseline counts.

    Rows with zero reported doses but a positive population are kept in the
    table but left out of the coverage rate and bias. ``direct`` optionally
    gives a (lo, hi) survey direct-estimate interval for the state total.
    """
    if est.level != "county":
        raise EvaluateError("coverage_report needs county-level estimates")
    base = baseline.by_county()
    rows, unmatched = [], []
    for i, cid in enumerate(est.ids):
        b = base.get(cid)
        if b is None:
            unmatched.append(cid)
            continue
        med, lo, hi = float(est.median[i]), float(est.lo95[i]), float(est.hi95[i])
        err = med - b.administered_first_doses
        rows.append(CountyComparison(
            cid, med, lo, hi, b.administered_first_doses, b.population,
            _covers(lo, hi, b.administered_first_doses),
            b.administered_first_doses == 0 and b.population > 0,
            err,
            abs(err) / b.administered_first_doses if b.administered_first_doses else math.nan,
        ))
    unmatched += sorted(set(base) - set(est.ids))
    inc = [r for r in rows if not r.excluded]
    state_info = {}
    if state is not None:
        total = sum(r.baseline for r in rows)
        state_info = {
            "median": float(state.median[0]), "lo95": float(state.lo95[0]), "hi95": float(state.hi95[0]),
            "baseline_total": total,
            "covers_baseline": _covers(state.lo95[0], state.hi95[0], total),
        }
        if direct is not None:
            lo, hi = direct
            state_info["direct"] = [lo, hi]
            state_info["overlaps_direct"] = bool(state.lo95[0] <= hi and lo <= state.hi95[0])
    return ComparisonReport(
        sex=est.sex,
        counties=tuple(rows),
        unmatched=tuple(unmatched),
        over_population=tuple(r.county_id for r in rows if r.baseline > r.population > 0),
        coverage_rate=float(np.mean([r.covered for r in inc])) if inc else math.nan,
        mean_abs_bias=float(np.mean([abs(r.error) for r in inc])) if inc else math.nan,
        mean_signed_error=float(np.mean([r.error for r in inc])) if inc else math.nan,
        n_included=len(inc),
        state=state_info,
    )


def report_to_csv(report: ComparisonReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in CountyComparison.__dataclass_fields__.values()]
    w.writerow(["sex"] + names)
    for r in report.counties:
        w.writerow([report.sex] + [repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()


def report_to_json(report: ComparisonReport) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.bool_, np.floating, np.integer)):
            return v.item()
        return v
    return json.dumps(clean(report.summary()), indent=2, sort_keys=True) + "\n"


# -- model ranking ------------------------------------------------------------

@dataclass(frozen=True)
class RankedModel:
    rank: int
    name: str
    lcpo: float
    complexity: int


def _complexity(name: str) -> int:
    spec = MODELS.get(name)
    return spec.complexity if spec is not None else len(MODELS)


def rank_models(fits) -> list[RankedModel]:
    """Ascending LCPO; exact ties go to the simpler model, then by name."""
    fits = list(fits)
    if not fits:
        raise EvaluateError("no models to rank")
    key = lambda f: (float(f[1]), _complexity(f[0]), f[0])  # noqa: E731
    ordered = sorted(fits, key=key)
    return [RankedModel(i + 1, n, float(v), _complexity(n)) for i, (n, v) in enumerate(ordered)]


def read_lcpo_table(source) -> dict[str, list[tuple[str, float]]]:
    """Rows of (model, sex, lcpo) grouped by sex."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    out: dict[str, list[tuple[str, float]]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(row["sex"], []).append((row["model"], float(row["lcpo"])))
    return out


# -- simulation ---------------------------------------------------------------

@dataclass(frozen=True)
class TruthSpec:
    """Generative truth on a lattice of counties.

    The county field and census counts are drawn once from ``field_seed``,
    so replicates differ only in survey sampling. Set ``field_seed`` to None
    to redraw them from each replicate's simulation seed instead.
    """

    rows: int = 4
    cols: int = 5
    alpha: float = 0.3
    age: tuple[float, ...] = (-0.4, 0.4)
    edu: tuple[float, ...] = (-0.5, 0.0, 0.5)
    sigma: float = 0.5
    phi: float = 0.5
    rho: float = 0.02
    sex_offset: float = -0.2  # added for males
    n_per_cell: float = 200.0
    pop_range: tuple[int, int] = (500, 5000)
    unobserved_fraction: float = 0.0
    field_seed: int | None = 12345

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise EvaluateError("lattice needs at least one row and column")
        if not self.sigma >= 0 or not 0 <= self.phi <= 1:
            raise EvaluateError("need sigma >= 0 and phi in [0, 1]")
        if not 0 < self.rho < 1:
            raise EvaluateError("rho must lie in (0, 1)")
        if not 0 <= self.unobserved_fraction < 1:
            raise EvaluateError("unobserved_fraction must lie in [0, 1)")
        if self.n_per_cell < 0:
            raise EvaluateError("n_per_cell must be nonnegative")
        lo, hi = self.pop_range
        if not 0 <= lo <= hi:
            raise EvaluateError("invalid pop_range")
        if not self.age or not self.edu:
            raise EvaluateError("need at least one age and one education level")

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        known = cls.__dataclass_fields__
        bad = set(d) - set(known)
        if bad:
            raise EvaluateError(f"unknown TruthSpec fields {sorted(bad)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        try:
            return cls(**kw)
        except TypeError as exc:
            raise EvaluateError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class SimulatedData:
    scheme: StrataScheme
    graph: AdjacencyGraph
    cells: dict[str, CellTable]
    poststrat: PoststratTable
    theta: dict[str, np.ndarray]  # (I, J, K) true probabilities
    truth_counts: dict[str, np.ndarray]  # (I,) exact poststratified counts
    unobserved: tuple[int, ...]


def bym2_field(graph: AdjacencyGraph, sigma: float, phi: float, rng: np.random.Generator) -> np.ndarray:
    """One draw of the BYM2 county effect with a scaled, constrained ICAR part."""
    v = rng.standard_normal(graph.n)
    scaled = gmrf.scale_structure(gmrf.icar_precision(graph))
    evals, vecs = np.linalg.eigh(scaled.scaled_Q.toarray())
    m = scaled.constraints.shape[0]
    z = rng.standard_normal(graph.n - m)
    u = vecs[:, m:] @ (z / np.sqrt(evals[m:]))
    return gmrf.bym2_effect(v, u, sigma, phi)


def simulate_dataset(truth: TruthSpec, seed: int) -> SimulatedData:
    graph = AdjacencyGraph.lattice(truth.rows, truth.cols)
    J, K = len(truth.age), len(truth.edu)
    scheme = StrataScheme(tuple(f"age{j + 1}" for j in range(J)), tuple(f"edu{k + 1}" for k in range(K)),
                          ("F", "M"), graph.node_ids)
    I = graph.n
    fseed = truth.field_seed if truth.field_seed is not None else derived_seed(seed, 1)
    frng = np.random.default_rng(fseed)
    gamma = bym2_field(graph, truth.sigma, truth.phi, frng)
    lo, hi = truth.pop_range
    N = frng.integers(lo, hi + 1, size=(I, J, K, 2))
    post = PoststratTable(N, ("F", "M"))

    rng = np.random.default_rng(seed)
    n_miss = int(round(truth.unobserved_fraction * I))
    miss = tuple(sorted(rng.choice(I, size=n_miss, replace=False).tolist())) if n_miss else ()
    base = (truth.alpha + np.asarray(truth.age)[None, :, None] + np.asarray(truth.edu)[None, None, :]
            + gamma[:, None, None])
    s = (1.0 - truth.rho) / truth.rho
    cells, theta, counts = {}, {}, {}
    for si, sex in enumerate(("F", "M")):
        th = expit(base + (truth.sex_offset if sex == "M" else 0.0))
        n = rng.poisson(truth.n_per_cell, size=(I, J, K)) if truth.n_per_cell > 0 else np.zeros((I, J, K), int)
        n[list(miss)] = 0
        p = rng.beta(th * s, (1.0 - th) * s)
        y = rng.binomial(n, p)
        cells[sex] = CellTable(sex, n, y)
        theta[sex] = th
        counts[sex] = (N[..., si] * th).sum(axis=(1, 2))
    return SimulatedData(scheme, graph, cells, post, theta, counts, miss)


def derived_seed(seed: int, *keys: int) -> int:
    """Independent child seed for replicate/substream ``keys``."""
    return int(np.random.SeedSequence(seed, spawn_key=tuple(keys)).generate_state(1)[0])


@dataclass(frozen=True)
class ReplicateResult:
    replicate: int
    model: str
    sex: str
    seed: int
    coverage: float
    mae: float
    covered: tuple[bool, ...]


def evaluate_fit_on_truth(data: SimulatedData, model_name: str, sex: str, S: int, seed: int,
                          config: FitConfig | None = None, replicate: int = 0) -> ReplicateResult:
    model = build_latent_model(model_name, data.cells[sex], data.graph, data.scheme)
    pf = fit(model, config)
    draws = sample_theta(pf, model, S=S, seed=seed)
    est = county_counts(draws, data.poststrat, sex, ids=data.scheme.county_ids)
    truth = data.truth_counts[sex]
    covered = tuple(bool(lo <= t <= hi) for lo, hi, t in zip(est.lo95, est.hi95, truth))
    return ReplicateResult(replicate, model_name, sex, seed, float(np.mean(covered)),
                           float(np.mean(np.abs(est.median - truth))), covered)


def run_replicates(truth: TruthSpec, models, n_replicates: int, seed: int, S: int = 1000,
                   sexes=("F",), config: FitConfig | None = None) -> list[ReplicateResult]:
    """Fit each model to each simulated replicate. Seeds derive from ``seed`` and the replicate index."""
    out = []
    for r in range(n_replicates):
        data = simulate_dataset(truth, derived_seed(seed, r, 0))
        for sex in sexes:
            for m in models:
                out.append(evaluate_fit_on_truth(data, m, sex, S, derived_seed(seed, r, 1), config, r))
    return out


def replicates_to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replicate", "model", "sex", "seed", "coverage", "mae"])
    for r in results:
        w.writerow([r.replicate, r.model, r.sex, r.seed, repr(r.coverage), repr(r.mae)])
    return buf.getvalue()
