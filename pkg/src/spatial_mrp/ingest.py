"""Parsing and validation of survey cells, census tables, adjacency graphs and
baseline counts.

All tables are dense over a :class:`StrataScheme` and read-only once built.
County identifiers are kept as 5-character FIPS strings.
"""
from __future__ import annotations

import csv
import difflib
import io
import json
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from typing import Iterable, TextIO

import numpy as np

AXES = ("age", "edu", "sex", "county")


class IngestError(ValueError):
    """Base class for input problems; the CLI maps it to exit code 2."""


class CategoricalError(IngestError):
    pass


class ConsistencyError(IngestError):
    pass


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class StrataScheme:
    age_levels: tuple[str, ...]
    edu_levels: tuple[str, ...]
    sexes: tuple[str, ...]
    county_ids: tuple[str, ...]

    def __post_init__(self):
        for name in ("age_levels", "edu_levels", "sexes", "county_ids"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if len(set(vals)) != len(vals):
                raise IngestError(f"duplicate labels in {name}")
        if self.J < 2 or self.K < 2:
            raise IngestError("need at least two age and two education levels")
        if self.I < 1:
            raise IngestError("need at least one county")
        if len(self.sexes) != 2:
            raise IngestError("sexes must have exactly two labels")

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.county_ids)

    @property
    def J(self) -> int:
        return len(self.age_levels)

    @property
    def K(self) -> int:
        return len(self.edu_levels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.I, self.J, self.K)

    @property
    def n_cells(self) -> int:
        return self.I * self.J * self.K

    def county_index(self, county_id: str) -> int:
        return self._index("county_ids")[county_id]

    def _index(self, name: str) -> dict[str, int]:
        cache = self.__dict__.setdefault("_idx", {})
        if name not in cache:
            cache[name] = {v: i for i, v in enumerate(getattr(self, name))}
        return cache[name]

    def to_dict(self) -> dict:
        return {
            "age_levels": list(self.age_levels),
            "edu_levels": list(self.edu_levels),
            "sexes": list(self.sexes),
            "county_ids": list(self.county_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StrataScheme":
        return cls(d["age_levels"], d["edu_levels"], d["sexes"], d["county_ids"])


@dataclass(frozen=True)
class LabelMap:
    """Alias table per axis, compared after case folding and whitespace collapse."""

    aliases: dict[str, dict[str, str]] = field(default_factory=dict)

    @staticmethod
    def _norm(s: str) -> str:
        return " ".join(str(s).split()).casefold()

    @classmethod
    def from_config(cls, config: dict[str, dict[str, list[str]]]) -> "LabelMap":
        out: dict[str, dict[str, str]] = {}
        for axis, canon in config.items():
            table: dict[str, str] = {}
            for label, alias_list in canon.items():
                for alias in [label, *alias_list]:
                    key = cls._norm(alias)
                    if key in table and table[key] != label:
                        raise IngestError(f"alias {alias!r} maps to two labels on axis {axis}")
                    table[key] = label
            out[axis] = table
        return cls(out)

    def with_axis(self, axis: str, pairs: dict[str, str]) -> "LabelMap":
        merged = {k: dict(v) for k, v in self.aliases.items()}
        table = merged.setdefault(axis, {})
        for alias, label in pairs.items():
            table[self._norm(alias)] = label
        return LabelMap(merged)


def harmonize(raw_label: str, axis: str, mapping: LabelMap) -> str:
    """Map a raw category label to its canonical form.

    Raises CategoricalError listing the closest known aliases when the label is
    not in the table.
    """
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}")
    table = mapping.aliases.get(axis, {})
    key = LabelMap._norm(raw_label)
    if key in table:
        return table[key]
    near = difflib.get_close_matches(key, list(table), n=3, cutoff=0.4)
    raise CategoricalError(
        f"unmapped {axis} label {raw_label!r}; nearest candidates: {near}"
    )


def default_label_map() -> LabelMap:
    with resources.files("spatial_mrp.data").joinpath("labels.json").open() as f:
        cfg = json.load(f)
    lm = LabelMap.from_config(cfg)
    return lm.with_axis("county", {name: fips for fips, name in ca_county_names().items()})


def ca_county_names() -> dict[str, str]:
    """FIPS -> county name for the 58 California counties."""
    with resources.files("spatial_mrp.data").joinpath("ca_counties.csv").open() as f:
        return {r["county_id"]: r["name"] for r in csv.DictReader(f)}


def california_scheme() -> StrataScheme:
    return StrataScheme(
        age_levels=("18-24", "25-64", "65+"),
        edu_levels=("less_than_hs", "hs", "some_college", "associates", "bachelors", "graduate"),
        sexes=("F", "M"),
        county_ids=tuple(ca_county_names()),
    )


def _open_text(source) -> TextIO:
    if isinstance(source, io.TextIOBase):
        return source
    if isinstance(source, (str, PathLike)):
        return open(source, newline="", encoding="utf-8")
    raise TypeError(f"cannot read CSV from {type(source).__name__}")


def _rows(source, required: Iterable[str]) -> list[tuple[int, dict[str, str]]]:
    f = _open_text(source)
    try:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            return []
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"missing columns {missing}")
        return [(lineno, row) for lineno, row in enumerate(reader, start=2)]
    finally:
        if f is not source:
            f.close()


def _count(value: str, lineno: int, column: str) -> int:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise IngestError(f"row {lineno}, column {column}: not a number: {value!r}") from None
    if v != int(v):
        raise ConsistencyError(f"row {lineno}, column {column}: not an integer count: {value!r}")
    if v < 0:
        raise ConsistencyError(f"row {lineno}, column {column}: negative count {value!r}")
    return int(v)


def _label(raw: str, axis: str, lineno: int, column: str, labels: LabelMap, valid) -> str:
    raw = raw.strip() if raw is not None else ""
    if raw in valid:
        return raw
    try:
        out = harmonize(raw, axis, labels)
    except CategoricalError as e:
        raise CategoricalError(f"row {lineno}, column {column}: {e}") from None
    if out not in valid:
        raise CategoricalError(f"row {lineno}, column {column}: {out!r} not in scheme")
    return out


@dataclass(frozen=True)
class CellTable:
    """Survey trials and successes per (county, age, education) for one sex."""

    sex: str
    n: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        n = _freeze(np.asarray(self.n, dtype=np.int64).copy())
        y = _freeze(np.asarray(self.y, dtype=np.int64).copy())
        if n.shape != y.shape or n.ndim != 3:
            raise ConsistencyError("n and y must be matching (I, J, K) arrays")
        if (n < 0).any() or (y < 0).any():
            raise ConsistencyError("counts must be nonnegative")
        if (y > n).any():
            raise ConsistencyError("y > n in some cell")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "y", y)

    @property
    def observed(self) -> np.ndarray:
        return self.n > 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.n.shape

    def stacked(self, times: int = 2) -> "CellTable":
        """Same cells with every count multiplied, i.e. data replicated."""
        return CellTable(self.sex, self.n * times, self.y * times)

    @classmethod
    def empty(cls, scheme: StrataScheme, sex: str) -> "CellTable":
        z = np.zeros(scheme.shape, dtype=np.int64)
        return cls(sex, z, z)


def parse_survey_cells(source, scheme: StrataScheme, sex: str,
                       labels: LabelMap | None = None) -> CellTable:
    labels = labels or default_label_map()
    n = np.zeros(scheme.shape, dtype=np.int64)
    y = np.zeros(scheme.shape, dtype=np.int64)
    seen: dict[tuple[int, int, int], int] = {}
    for lineno, row in _rows(source, ("county_id", "age", "education", "n", "y")):
        c = _label(row["county_id"], "county", lineno, "county_id", labels, scheme._index("county_ids"))
        a = _label(row["age"], "age", lineno, "age", labels, scheme._index("age_levels"))
        e = _label(row["education"], "edu", lineno, "education", labels, scheme._index("edu_levels"))
        key = (scheme.county_index(c), scheme._index("age_levels")[a], scheme._index("edu_levels")[e])
        if key in seen:
            raise ConsistencyError(f"duplicate cell key at row {lineno} (first seen at row {seen[key]})")
        seen[key] = lineno
        nn = _count(row["n"], lineno, "n")
        yy = _count(row["y"], lineno, "y")
        if yy > nn:
            raise ConsistencyError(f"row {lineno}: y={yy} exceeds n={nn}")
        n[key], y[key] = nn, yy
    return CellTable(sex, n, y)


@dataclass(frozen=True)
class PoststratTable:
    """Census counts N[i, j, k, s] with s indexing ``scheme.sexes``."""

    counts: np.ndarray
    sexes: tuple[str, ...]
    rows_per_sex: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        c = _freeze(np.asarray(self.counts, dtype=np.int64).copy())
        if c.ndim != 4 or c.shape[3] != len(self.sexes):
            raise ConsistencyError("counts must be (I, J, K, n_sexes)")
        if (c < 0).any():
            raise ConsistencyError("negative census count")
        object.__setattr__(self, "counts", c)
        object.__setattr__(self, "sexes", tuple(self.sexes))

    def for_sex(self, sex: str) -> np.ndarray:
        return self.counts[..., self.sexes.index(sex)]

    def county_totals(self, sex: str) -> np.ndarray:
        return self.for_sex(sex).sum(axis=(1, 2))

    def state_total(self, sex: str) -> int:
        return int(self.for_sex(sex).sum())


def parse_poststrat(source, scheme: StrataScheme, labels: LabelMap | None = None) -> PoststratTable:
    labels = labels or default_label_map()
    counts = np.zeros((*scheme.shape, len(scheme.sexes)), dtype=np.int64)
    rows_per_sex = {s: 0 for s in scheme.sexes}
    seen = set()
    for lineno, row in _rows(source, ("county_id", "age", "education", "sex", "count")):
        c = _label(row["county_id"], "county", lineno, "county_id", labels, scheme._index("county_ids"))
        a = _label(row["age"], "age", lineno, "age", labels, scheme._index("age_levels"))
        e = _label(row["education"], "edu", lineno, "education", labels, scheme._index("edu_levels"))
        s = _label(row["sex"], "sex", lineno, "sex", labels, scheme._index("sexes"))
        key = (scheme.county_index(c), scheme._index("age_levels")[a],
               scheme._index("edu_levels")[e], scheme._index("sexes")[s])
        if key in seen:
            raise ConsistencyError(f"duplicate poststratification key at row {lineno}")
        seen.add(key)
        counts[key] = _count(row["count"], lineno, "count")
        rows_per_sex[s] += 1
    return PoststratTable(counts, scheme.sexes, rows_per_sex)


@dataclass(frozen=True)
class AdjacencyGraph:
    node_ids: tuple[str, ...]
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        n = len(self.node_ids)
        clean = set()
        for a, b in self.edges:
            if a == b:
                raise ConsistencyError(f"self-loop at node {self.node_ids[a]}")
            if not (0 <= a < n and 0 <= b < n):
                raise ConsistencyError("edge endpoint out of range")
            clean.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(clean))

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def neighbors(self) -> list[list[int]]:
        nb: list[list[int]] = [[] for _ in range(self.n)]
        for a, b in sorted(self.edges):
            nb[a].append(b)
            nb[b].append(a)
        return nb

    @property
    def degree(self) -> np.ndarray:
        return np.array([len(v) for v in self.neighbors()], dtype=np.int64)

    @property
    def components(self) -> np.ndarray:
        """Component label per node, labels ordered by first node."""
        cache = self.__dict__.get("_components")
        if cache is not None:
            return cache
        labels = -np.ones(self.n, dtype=np.int64)
        nb = self.neighbors()
        nxt = 0
        for start in range(self.n):
            if labels[start] >= 0:
                continue
            stack = [start]
            labels[start] = nxt
            while stack:
                v = stack.pop()
                for w in nb[v]:
                    if labels[w] < 0:
                        labels[w] = nxt
                        stack.append(w)
            nxt += 1
        self.__dict__["_components"] = _freeze(labels)
        return labels

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1 if self.n else 0

    @classmethod
    def from_pairs(cls, node_ids, pairs) -> "AdjacencyGraph":
        idx = {v: i for i, v in enumerate(node_ids)}
        return cls(tuple(node_ids), frozenset((idx[a], idx[b]) for a, b in pairs))

    @classmethod
    def lattice(cls, rows: int, cols: int, prefix: str = "99") -> "AdjacencyGraph":
        """Rook-contiguity grid; node ids are synthetic 5-digit codes."""
        ids = tuple(f"{prefix}{r * cols + c + 1:03d}" for r in range(rows) for c in range(cols))
        edges = set()
        for r in range(rows):
            for c in range(cols):
                v = r * cols + c
                if c + 1 < cols:
                    edges.add((v, v + 1))
                if r + 1 < rows:
                    edges.add((v, v + cols))
        return cls(ids, frozenset(edges))


def parse_adjacency(source, scheme: StrataScheme) -> AdjacencyGraph:
    idx = scheme._index("county_ids")
    f = _open_text(source)
    try:
        edges = set()
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 2:
                raise IngestError(f"line {lineno}: expected two FIPS codes")
            a, b = (v.strip() for v in row)
            if lineno == 1 and a not in idx and not a.isdigit():
                continue  # header
            for v in (a, b):
                if v not in idx:
                    raise CategoricalError(f"line {lineno}: unknown FIPS {v!r}")
            if a == b:
                raise ConsistencyError(f"line {lineno}: self-loop at {a}")
            edges.add((idx[a], idx[b]))
    finally:
        if f is not source:
            f.close()
    return AdjacencyGraph(scheme.county_ids, frozenset(edges))


def california_graph(scheme: StrataScheme | None = None) -> AdjacencyGraph:
    scheme = scheme or california_scheme()
    with resources.files("spatial_mrp.data").joinpath("ca_adjacency.csv").open() as f:
        return parse_adjacency(io.StringIO(f.read()), scheme)


@dataclass(frozen=True)
class BaselineRow:
    county_id: str
    administered_first_doses: int
    population: int
    proportion: float


@dataclass(frozen=True)
class BaselineTable:
    rows: tuple[BaselineRow, ...]

    def by_county(self) -> dict[str, BaselineRow]:
        return {r.county_id: r for r in self.rows}


def parse_baseline(source, labels: LabelMap | None = None) -> BaselineTable:
    """Read baseline first-dose counts; the proportion column is recomputed.

    County names are mapped to FIPS codes when the label map knows them;
    unknown names are kept verbatim.
    """
    labels = labels or default_label_map()
    rows = []
    for lineno, row in _rows(source, ("county", "doses", "population")):
        raw = row["county"].strip()
        try:
            cid = harmonize(raw, "county", labels)
        except CategoricalError:
            cid = raw
        doses = _count(row["doses"], lineno, "doses")
        pop = _count(row["population"], lineno, "population")
        if pop == 0:
            if doses:
                raise ConsistencyError(f"row {lineno}: {doses} doses with zero population")
            prop = 0.0
        else:
            prop = doses / pop
        rows.append(BaselineRow(cid, doses, pop, prop))
    return BaselineTable(tuple(rows))


def packaged_baseline(block: str = "a") -> BaselineTable:
    """Published county first-dose table (two 58-county blocks, ``a`` and ``b``)."""
    name = f"baseline_table5_{block}.csv"
    with resources.files("spatial_mrp.data").joinpath(name).open() as f:
        return parse_baseline(io.StringIO(f.read()))


# -- writers (same schemas the parsers read) --------------------------------

def write_survey_cells(table: CellTable, scheme: StrataScheme, dest: TextIO) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["county_id", "age", "education", "n", "y"])
    for i, j, k in zip(*np.nonzero(table.n > 0)):
        w.writerow([scheme.county_ids[i], scheme.age_levels[j], scheme.edu_levels[k],
                    int(table.n[i, j, k]), int(table.y[i, j, k])])


def write_poststrat(table: PoststratTable, scheme: StrataScheme, dest: TextIO) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["county_id", "age", "education", "sex", "count"])
    I, J, K, S = table.counts.shape
    for i in range(I):
        for j in range(J):
            for k in range(K):
                for s in range(S):
                    w.writerow([scheme.county_ids[i], scheme.age_levels[j], scheme.edu_levels[k],
                                table.sexes[s], int(table.counts[i, j, k, s])])


def write_adjacency(graph: AdjacencyGraph, dest: TextIO) -> None:
    for a, b in sorted(graph.edges):
        dest.write(f"{graph.node_ids[a]},{graph.node_ids[b]}\n")


def write_baseline(table: BaselineTable, dest: TextIO) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["county", "doses", "population", "proportion"])
    for r in table.rows:
        w.writerow([r.county_id, r.administered_first_doses, r.population, f"{r.proportion:.6f}"])
