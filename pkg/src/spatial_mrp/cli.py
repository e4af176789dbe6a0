"""Command-line front end: fit, poststratify, evaluate, simulate, compare.

Exit codes: 0 success, 2 config or input error, 3 missing artifact,
4 numerical failure. Failures print one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import os
import sys
import tempfile
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ingest
from .evaluate import (
    EvaluateError,
    TruthSpec,
    coverage_report,
    rank_models,
    read_lcpo_table,
    report_to_csv,
    report_to_json,
    simulate_dataset,
)
from .gmrf import GMRFError
from .inference import MODELS, FitConfig, FitError, ModelError, ThetaDraws, build_latent_model, fit, sample_theta
from .inference.cpo import compute_cpo
from .poststrat import (
    DEFAULT_DRAWS,
    CountEstimates,
    PoststratError,
    combine_sexes,
    county_counts,
    estimates_to_csv,
    read_estimates_csv,
    state_aggregate,
)
from .priors import PriorError, PriorSet

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


@dataclass
class RunConfig:
    """Everything a command needs; relative paths resolve against the config file."""

    model: str = "rw1_bym2"
    survey: dict[str, str] = field(default_factory=dict)  # sex -> cells CSV
    poststrat: str | None = None
    adjacency: str | None = None
    baseline: str | None = None
    scheme: str | None = None  # JSON; California by default
    out: str = "out"
    priors: dict = field(default_factory=dict)
    fit: dict = field(default_factory=dict)
    S: int = DEFAULT_DRAWS
    cpo_draws: int = 4000
    seed: int = 0
    retain_draws: bool = False
    charts: bool = False
    truth: dict | None = None
    models: list[str] | None = None
    lcpo_table: str | None = None
    evaluate_sex: str = "combined"
    direct: list[float] | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.model not in MODELS:
            raise CliError(EXIT_CONFIG, "config", f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        for m in self.models or []:
            if m not in MODELS:
                raise CliError(EXIT_CONFIG, "config", f"unknown model {m!r}")
        if not isinstance(self.S, int) or self.S < 1:
            raise CliError(EXIT_CONFIG, "config", "S must be a positive integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise CliError(EXIT_CONFIG, "config", "seed must be a nonnegative integer")

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data: dict = {}
        base = "."
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    data = json.load(fh)
            except FileNotFoundError:
                raise CliError(EXIT_CONFIG, "config", f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_CONFIG, "config", f"config is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise CliError(EXIT_CONFIG, "config", "config must be a JSON object")
            base = str(Path(path).resolve().parent)
        known = {f.name for f in fields(cls)} - {"base_dir"}
        bad = set(data) - known
        if bad:
            raise CliError(EXIT_CONFIG, "config", f"unknown config keys {sorted(bad)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data, base_dir=base)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @property
    def out_dir(self) -> Path:
        return self.path(self.out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def substream(seed: int, name: str, *keys: int) -> int:
    """Seed for a named random substream derived from the run seed."""
    key = (zlib.crc32(name.encode()),) + tuple(keys)
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


# -- file helpers --------------------------------------------------------------

def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_npy(path: Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    _atomic_write(path, buf.getvalue())


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_, np.integer, np.floating)):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _need_input(cfg: RunConfig, p: str | None, what: str) -> Path:
    if p is None:
        raise CliError(EXIT_CONFIG, "config", f"config does not name a {what} file")
    path = cfg.path(p)
    if not path.exists():
        raise CliError(EXIT_CONFIG, "input", f"{what} file not found: {path}")
    return path


def _need_artifact(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_MISSING, "missing_artifact", f"{what} not found: {path}; run the earlier step first")
    return path


def _scheme(cfg: RunConfig) -> ingest.StrataScheme:
    if cfg.scheme is None:
        return ingest.california_scheme()
    path = _need_input(cfg, cfg.scheme, "scheme")
    with open(path, encoding="utf-8") as fh:
        return ingest.StrataScheme.from_dict(json.load(fh))


def _graph(cfg: RunConfig, scheme: ingest.StrataScheme) -> ingest.AdjacencyGraph:
    if cfg.adjacency is None:
        if scheme.county_ids != ingest.california_scheme().county_ids:
            raise CliError(EXIT_CONFIG, "config", "adjacency file required for a non-California scheme")
        return ingest.california_graph(scheme)
    return ingest.parse_adjacency(_need_input(cfg, cfg.adjacency, "adjacency"), scheme)


def _sexes(cfg: RunConfig) -> list[str]:
    if not cfg.survey:
        raise CliError(EXIT_CONFIG, "config", "config names no survey files")
    return sorted(cfg.survey)


def _draws_path(cfg: RunConfig, sex: str) -> Path:
    return cfg.out_dir / f"draws_{sex}.npy"


# -- commands ------------------------------------------------------------------

def cmd_fit(cfg: RunConfig) -> dict:
    scheme = _scheme(cfg)
    graph = _graph(cfg, scheme)
    priors = PriorSet.from_config(cfg.priors)
    fcfg = FitConfig.from_dict(cfg.fit)
    report = {"model": cfg.model, "S": cfg.S, "seed": cfg.seed, "sexes": {}}
    for si, sex in enumerate(_sexes(cfg)):
        cells = ingest.parse_survey_cells(_need_input(cfg, cfg.survey[sex], f"survey ({sex})"), scheme, sex)
        model = build_latent_model(cfg.model, cells, graph, scheme, priors=priors)
        pf = fit(model, fcfg)
        seed = substream(cfg.seed, "draws", si)
        draws = sample_theta(pf, model, S=cfg.S, seed=seed)
        cpo = compute_cpo(pf, model, S=cfg.cpo_draws, seed=substream(cfg.seed, "cpo", si))
        _save_npy(_draws_path(cfg, sex), draws.theta)
        report["sexes"][sex] = {
            "draws_seed": seed,
            "draws_shape": list(draws.theta.shape),
            "lcpo": cpo.lcpo,
            "cpo_floored": cpo.n_floored,
            "n_observed_cells": int(cells.observed.sum()),
            "hyper_mode": model.natural_hyper(pf.mode),
            "hyper_names": list(model.hyper_names),
            "n_grid_points": len(pf.points),
            "diagnostics": pf.diagnostics,
        }
    _atomic_write(cfg.out_dir / "fit_diagnostics.json", _dump_json(report))
    return {"written": ["fit_diagnostics.json"] + [f"draws_{s}.npy" for s in report["sexes"]]}


def _load_draws(cfg: RunConfig, sex: str, n_cells: int) -> ThetaDraws:
    path = _need_artifact(_draws_path(cfg, sex), f"draws for sex {sex}")
    theta = np.load(path, allow_pickle=False)
    if theta.ndim != 2 or theta.shape[1] != n_cells:
        raise CliError(EXIT_CONFIG, "input", f"{path} has shape {theta.shape}, expected (S, {n_cells})")
    return ThetaDraws(theta=theta, rho=np.zeros(theta.shape[0]), seed=substream(cfg.seed, "draws",
                                                                                 _sexes(cfg).index(sex)))


def cmd_poststratify(cfg: RunConfig) -> dict:
    scheme = _scheme(cfg)
    post = ingest.parse_poststrat(_need_input(cfg, cfg.poststrat, "poststrat"), scheme)
    sexes = _sexes(cfg)
    counties, states, props = {}, {}, {}
    for sex in sexes:
        if sex not in post.sexes:
            raise CliError(EXIT_CONFIG, "input", f"poststrat table has no rows for sex {sex}")
        draws = _load_draws(cfg, sex, scheme.n_cells)
        counties[sex] = county_counts(draws, post, sex, ids=scheme.county_ids, retain=True)
        agg = state_aggregate(draws, post, sex, retain=True)
        states[sex], props[sex] = agg.counts, agg.proportion
    rows = [counties[s] for s in sexes] + [states[s] for s in sexes]
    prop_rows = [props[s] for s in sexes]
    if len(sexes) == 2:
        a, b = sexes
        rows.insert(2, combine_sexes(counties[a], counties[b], retain=True))
        rows.append(combine_sexes(states[a], states[b], retain=True))
    written = ["estimates.csv", "state_proportion.csv"]
    _atomic_write(cfg.out_dir / "estimates.csv", estimates_to_csv(rows))
    _atomic_write(cfg.out_dir / "state_proportion.csv", estimates_to_csv(prop_rows))
    if cfg.retain_draws:
        for est in rows:
            name = f"{est.level}_draws_{est.sex}.npy"
            _save_npy(cfg.out_dir / name, est.draws)
            written.append(name)
    return {"written": written}


def _estimates_from_rows(rows, level: str, sex: str) -> CountEstimates:
    sel = [r for r in rows if r["level"] == level and r["sex"] == sex]
    if not sel:
        raise CliError(EXIT_MISSING, "missing_artifact", f"no {level} estimates for sex {sex!r}")
    return CountEstimates(
        tuple(r["id"] for r in sel),
        np.array([r["median"] for r in sel]), np.array([r["lo95"] for r in sel]),
        np.array([r["hi95"] for r in sel]), level, sex, sel[0]["S"], sel[0]["seed"],
    )


def _chart(report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "spatial-mrp"
    rows = report.counties
    base = np.array([r.baseline for r in rows], dtype=float)
    med = np.array([r.median for r in rows])
    err = np.vstack([med - [r.lo95 for r in rows], [r.hi95 for r in rows] - med])
    fig, ax = plt.subplots(figsize=(6, 6))
    colors = ["tab:blue" if r.covered else "tab:red" for r in rows]
    ax.errorbar(base, med, yerr=err, fmt="none", ecolor="0.6", lw=0.8)
    ax.scatter(base, med, c=colors, s=12, zorder=3)
    hi = max(base.max(initial=1.0), float(np.max(med, initial=1.0))) * 1.05
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xscale("symlog")
    ax.set_yscale("symlog")
    ax.set_xlabel("baseline count")
    ax.set_ylabel("estimated count (median, 95% interval)")
    ax.set_title(f"County estimates vs baseline ({report.sex})")
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    _atomic_write(path, buf.getvalue())


def cmd_evaluate(cfg: RunConfig) -> dict:
    baseline = ingest.parse_baseline(_need_input(cfg, cfg.baseline, "baseline"))
    rows = read_estimates_csv(_need_artifact(cfg.out_dir / "estimates.csv", "estimates.csv"))
    sex = cfg.evaluate_sex
    est = _estimates_from_rows(rows, "county", sex)
    state = _estimates_from_rows(rows, "state", sex) if any(
        r["level"] == "state" and r["sex"] == sex for r in rows) else None
    direct = tuple(cfg.direct) if cfg.direct else None
    report = coverage_report(est, baseline, state=state, direct=direct)
    _atomic_write(cfg.out_dir / "report.csv", report_to_csv(report))
    _atomic_write(cfg.out_dir / "report.json", report_to_json(report))
    written = ["report.csv", "report.json"]
    if cfg.charts:
        _chart(report, cfg.out_dir / "estimates_vs_baseline.svg")
        written.append("estimates_vs_baseline.svg")
    return {"written": written, "coverage_rate": report.coverage_rate,
            "mean_signed_error": report.mean_signed_error}


def cmd_simulate(cfg: RunConfig) -> dict:
    if cfg.truth is None:
        raise CliError(EXIT_CONFIG, "config", "simulate needs a 'truth' object in the config")
    if not isinstance(cfg.truth, dict):
        raise CliError(EXIT_CONFIG, "config", "'truth' must be a JSON object")
    truth = TruthSpec.from_dict(cfg.truth)
    data = simulate_dataset(truth, substream(cfg.seed, "simulate"))
    out = cfg.out_dir

    def text(writer, *args):
        buf = io.StringIO()
        writer(*args, buf)
        return buf.getvalue()

    for sex, cells in data.cells.items():
        _atomic_write(out / f"survey_{sex}.csv", text(ingest.write_survey_cells, cells, data.scheme))
    _atomic_write(out / "poststrat.csv", text(ingest.write_poststrat, data.poststrat, data.scheme))
    _atomic_write(out / "adjacency.csv", text(ingest.write_adjacency, data.graph))
    _atomic_write(out / "scheme.json", _dump_json(data.scheme.to_dict()))
    lines = ["county_id,sex,true_count"]
    for sex, tc in data.truth_counts.items():
        lines += [f"{cid},{sex},{v!r}" for cid, v in zip(data.scheme.county_ids, tc.tolist())]
    _atomic_write(out / "truth_counts.csv", "\n".join(lines) + "\n")
    # true combined counts in the baseline schema, so evaluate can score a fit against them
    total = sum(data.truth_counts.values())
    pop = data.poststrat.counts.sum(axis=(1, 2, 3))
    lines = ["county,doses,population,proportion"]
    lines += [f"{cid},{int(round(t))},{int(p)},{round(t) / p if p else 0.0:.6f}"
              for cid, t, p in zip(data.scheme.county_ids, total.tolist(), pop.tolist())]
    _atomic_write(out / "baseline.csv", "\n".join(lines) + "\n")
    run = {
        "model": cfg.model, "survey": {s: f"survey_{s}.csv" for s in data.cells},
        "poststrat": "poststrat.csv", "adjacency": "adjacency.csv", "scheme": "scheme.json",
        "baseline": "baseline.csv", "out": "fit", "S": cfg.S, "seed": cfg.seed,
    }
    _atomic_write(out / "run_config.json", _dump_json(run))
    return {"written": ["survey_F.csv", "survey_M.csv", "poststrat.csv", "adjacency.csv", "scheme.json",
                        "truth_counts.csv", "baseline.csv", "run_config.json"],
            "unobserved": [data.scheme.county_ids[i] for i in data.unobserved]}


def cmd_compare(cfg: RunConfig) -> dict:
    if cfg.lcpo_table is not None:
        table = read_lcpo_table(_need_input(cfg, cfg.lcpo_table, "LCPO table"))
    else:
        scheme = _scheme(cfg)
        graph = _graph(cfg, scheme)
        priors = PriorSet.from_config(cfg.priors)
        fcfg = FitConfig.from_dict(cfg.fit)
        table = {}
        for si, sex in enumerate(_sexes(cfg)):
            cells = ingest.parse_survey_cells(_need_input(cfg, cfg.survey[sex], f"survey ({sex})"), scheme, sex)
            for name in cfg.models or sorted(MODELS, key=lambda m: MODELS[m].complexity):
                model = build_latent_model(name, cells, graph, scheme, priors=priors)
                pf = fit(model, fcfg)
                cpo = compute_cpo(pf, model, S=cfg.cpo_draws, seed=substream(cfg.seed, "cpo", si))
                table.setdefault(sex, []).append((name, cpo.lcpo))
    lines = ["sex,rank,model,lcpo"]
    out = {}
    for sex in sorted(table):
        ranked = rank_models(table[sex])
        out[sex] = [asdict(r) for r in ranked]
        lines += [f"{sex},{r.rank},{r.name},{r.lcpo!r}" for r in ranked]
    _atomic_write(cfg.out_dir / "lcpo_table.csv", "\n".join(lines) + "\n")
    _atomic_write(cfg.out_dir / "lcpo_table.json", _dump_json(out))
    return {"written": ["lcpo_table.csv", "lcpo_table.json"], "ranking": out}


COMMANDS = {
    "fit": cmd_fit,
    "poststratify": cmd_poststratify,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spatial-mrp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--model", help="model name (" + ", ".join(sorted(MODELS)) + ")")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--draws", type=int, dest="S", help="posterior draws S")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--charts", action="store_true", default=None, help="emit SVG charts")
    return p


cmd_fit.__doc__ = "Fit the model per sex; write draws and diagnostics."
cmd_poststratify.__doc__ = "Turn draws into county, state and combined estimates."
cmd_evaluate.__doc__ = "Compare estimates with a baseline table."
cmd_simulate.__doc__ = "Simulate a dataset from a truth spec."
cmd_compare.__doc__ = "Rank models by LCPO."


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra},
                                sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in ("model", "seed", "S", "out", "charts")}
    try:
        cfg = RunConfig.load(args.config, overrides)
        result = COMMANDS[args.command](cfg)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except (FitError, GMRFError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))
    except (ingest.IngestError, ModelError, PriorError, PoststratError, EvaluateError, TypeError,
            ValueError, KeyError) as exc:
        return _fail(EXIT_CONFIG, "input", str(exc))
    sys.stdout.write(json.dumps(_jsonable({"command": args.command, **result}), sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
