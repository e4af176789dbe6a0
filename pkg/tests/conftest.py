import numpy as np
import pytest

from spatial_mrp.ingest import AdjacencyGraph, CellTable, StrataScheme

TOY_IDS = ("90001", "90002", "90003", "90004", "90005")
# a triangle with a tail, so degrees differ
TOY_EDGES = [("90001", "90002"), ("90002", "90003"), ("90001", "90003"), ("90003", "90004"),
             ("90004", "90005")]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_connected_graph(n, rng, extra=0.1):
    ids = tuple(f"{i:05d}" for i in range(n))
    edges = set()
    for v in range(1, n):
        edges.add((int(rng.integers(v)), v))  # random spanning tree
    for a in range(n):
        for b in range(a + 1, n):
            if rng.uniform() < extra:
                edges.add((a, b))
    return AdjacencyGraph(ids, frozenset(edges))


def path_graph(n):
    ids = tuple(f"{i:05d}" for i in range(n))
    return AdjacencyGraph(ids, frozenset((i, i + 1) for i in range(n - 1)))


@pytest.fixture
def toy_graph():
    return AdjacencyGraph.from_pairs(TOY_IDS, TOY_EDGES)


@pytest.fixture
def toy_scheme():
    return StrataScheme(("a1", "a2"), ("e1", "e2", "e3"), ("F", "M"), TOY_IDS)


def make_cells(scheme, seed=0, sex="F", n_range=(20, 60), drop=()):
    rng = np.random.default_rng(seed)
    I, J, K = scheme.shape
    eta = (0.2 + np.linspace(-0.3, 0.3, J)[None, :, None] + np.linspace(-0.4, 0.4, K)[None, None, :]
           + rng.normal(0, 0.4, I)[:, None, None])
    n = rng.integers(*n_range, size=(I, J, K))
    n[list(drop)] = 0
    y = rng.binomial(n, 1 / (1 + np.exp(-eta)))
    return CellTable(sex, n, y)


@pytest.fixture
def toy_cells(toy_scheme):
    return make_cells(toy_scheme)
