"""Poststratification of cell-probability draws into county and state counts."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .ingest import PoststratTable

DEFAULT_DRAWS = 1000
LEVELS = ("county", "state")


class PoststratError(ValueError):
    pass


@dataclass(frozen=True)
class PoststratWeights:
    """``w[i, j, k] = N_ijk / N_i``; ``empty[i]`` marks zero-population counties."""

    w: np.ndarray
    empty: np.ndarray


def poststrat_weights(post: PoststratTable, sex: str) -> PoststratWeights:
    N = post.for_sex(sex).astype(float)
    tot = N.sum(axis=(1, 2))
    empty = tot == 0
    w = np.zeros_like(N)
    w[~empty] = N[~empty] / tot[~empty, None, None]
    return PoststratWeights(w, empty)


def _summarize(draws: np.ndarray):
    med, lo, hi = np.percentile(draws, [50.0, 2.5, 97.5], axis=0)
    return med, lo, hi


@dataclass(frozen=True)
class CountEstimates:
    """Posterior summaries for a set of geographies.

    ``draws`` has shape (S, n_geo) when retained.
    """

    ids: tuple[str, ...]
    median: np.ndarray
    lo95: np.ndarray
    hi95: np.ndarray
    level: str
    sex: str
    S: int
    seed: int | None = None
    draws: np.ndarray | None = None
    scale: str = "count"

    def __post_init__(self):
        if self.level not in LEVELS:
            raise PoststratError(f"unknown level {self.level!r}")
        if len(self.ids) != len(self.median):
            raise PoststratError("ids and estimates differ in length")

    @classmethod
    def from_draws(cls, ids, draws, level, sex, seed=None, retain=True, scale="count"):
        draws = np.asarray(draws, dtype=float)
        med, lo, hi = _summarize(draws)
        return cls(tuple(ids), med, lo, hi, level, sex, draws.shape[0], seed,
                   draws if retain else None, scale)

    def record(self, geo_id: str) -> dict:
        i = self.ids.index(geo_id)
        return {"median": float(self.median[i]), "lo95": float(self.lo95[i]), "hi95": float(self.hi95[i])}


def _cell_draws(draws, post: PoststratTable, sex: str) -> np.ndarray:
    theta = draws.theta if hasattr(draws, "theta") else np.asarray(draws, dtype=float)
    I, J, K = post.counts.shape[:3]
    if theta.ndim != 2 or theta.shape[1] != I * J * K:
        raise PoststratError(f"draws have {theta.shape[-1]} cells but the poststrat table has {I * J * K}")
    return theta.reshape(theta.shape[0], I, J, K)


def _seed(draws):
    return getattr(draws, "seed", None)


def _ids(post: PoststratTable, ids):
    I = post.counts.shape[0]
    ids = tuple(str(i) for i in range(I)) if ids is None else tuple(ids)
    if len(ids) != I:
        raise PoststratError(f"{len(ids)} county ids for {I} counties")
    return ids


def county_draws(draws, post: PoststratTable, sex: str) -> np.ndarray:
    """Per-draw county counts, shape (S, I)."""
    theta = _cell_draws(draws, post, sex)
    N = post.for_sex(sex).astype(float)
    return np.einsum("sijk,ijk->si", theta, N)


def county_counts(draws, post: PoststratTable, sex: str, ids=None, retain: bool = False) -> CountEstimates:
    y = county_draws(draws, post, sex)
    return CountEstimates.from_draws(_ids(post, ids), y, "county", sex, _seed(draws), retain)


@dataclass(frozen=True)
class StateAggregate:
    counts: CountEstimates
    proportion: CountEstimates


def state_aggregate(draws, post: PoststratTable, sex: str, retain: bool = False,
                    state_id: str = "state") -> StateAggregate:
    y = county_draws(draws, post, sex).sum(axis=1, keepdims=True)
    theta = _cell_draws(draws, post, sex)
    N = post.for_sex(sex).astype(float)
    total = N.sum()
    prop = (np.einsum("sijk,ijk->s", theta, N / total) if total > 0
            else np.zeros(theta.shape[0]))[:, None]
    seed = _seed(draws)
    return StateAggregate(
        CountEstimates.from_draws((state_id,), y, "state", sex, seed, retain),
        CountEstimates.from_draws((state_id,), prop, "state", sex, seed, retain, scale="proportion"),
    )


def combine_sexes(female: CountEstimates, male: CountEstimates, retain: bool = False) -> CountEstimates:
    """Draw-wise sum of two independently fitted sexes."""
    if female.draws is None or male.draws is None:
        raise PoststratError("combining sexes needs retained draws")
    if female.level != male.level or female.ids != male.ids:
        raise PoststratError("estimates cover different geographies")
    if female.S != male.S:
        raise PoststratError(f"draw counts differ: {female.S} vs {male.S}")
    if female.scale != male.scale:
        raise PoststratError("cannot combine different scales")
    seed = female.seed if female.seed == male.seed else None
    return CountEstimates.from_draws(female.ids, female.draws + male.draws, female.level, "combined",
                                     seed, retain, female.scale)


CSV_FIELDS = ("level", "id", "sex", "median", "lo95", "hi95", "S", "seed")


def estimates_to_csv(estimates, dest=None) -> str:
    """CSV rows for one or more CountEstimates; written to ``dest`` if given."""
    if isinstance(estimates, CountEstimates):
        estimates = [estimates]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for est in estimates:
        for i, gid in enumerate(est.ids):
            w.writerow([est.level, gid, est.sex, repr(float(est.median[i])), repr(float(est.lo95[i])),
                        repr(float(est.hi95[i])), est.S, "" if est.seed is None else est.seed])
    text = buf.getvalue()
    if dest is not None:
        with open(dest, "w", newline="") as fh:
            fh.write(text)
    return text


def read_estimates_csv(source) -> list[dict]:
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and set(CSV_FIELDS) - set(rows[0]):
        raise PoststratError(f"estimates CSV lacks columns {sorted(set(CSV_FIELDS) - set(rows[0]))}")
    for r in rows:
        for k in ("median", "lo95", "hi95"):
            r[k] = float(r[k])
        r["S"] = int(r["S"])
        r["seed"] = int(r["seed"]) if r["seed"] else None
    return rows
