import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from csmaca.graph import ConflictGraph

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERIA: dict = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.outcome != "passed"):
        n, title = mark.args
        prev = _CRITERIA.get(n, (title, True))
        _CRITERIA[n] = (title, prev[1] and rep.passed)
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")


@st.composite
def graphs(draw, min_links=1, max_links=6):
    K = draw(st.integers(min_links, max_links))
    pairs = list(itertools.combinations(range(K), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    return ConflictGraph(K, frozenset(chosen))


def random_graph(rng: np.random.Generator, K: int, density: float = 0.5) -> ConflictGraph:
    edges = [(i, j) for i, j in itertools.combinations(range(K), 2) if rng.random() < density]
    return ConflictGraph(K, frozenset(edges))
