import itertools
from pathlib import Path

import pytest
from hypothesis import settings

import bayesperf

from bayesperf.events import CounterKind, EventCatalog, EventId
from bayesperf.relations import RelationFactor, build_factor_graph

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_catalog(names, n_p=3, fixed=(), constraints=()):
    events = [EventId(n, CounterKind.FIXED) for n in fixed]
    events += [EventId(n) for n in names]
    return EventCatalog(events, len(fixed), n_p, constraints)


@pytest.fixture
def fg_graph():
    """f(e1, e2) and g(e2, e3, e4), plus an isolated e5."""
    names = ["e1", "e2", "e3", "e4", "e5"]
    cat = make_catalog(names, n_p=2)
    rels = [RelationFactor("f", "e1", "e2"),
            RelationFactor("g", "e2", "(add e3 e4)")]
    return cat, build_factor_graph(cat, rels)


def all_assignments(catalog, names):
    """Every injective map from names to programmable counters."""
    for counters in itertools.permutations(range(catalog.n_programmable), len(names)):
        yield dict(zip(counters, names))


DATA = Path(bayesperf.__file__).parent / "data"
A1_SCENARIO = DATA / "a1_scenario.json"


# Acceptance criteria report ------------------------------------------------------

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line, print it, and fail the test if it failed."""
    def record(name, ok, detail):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE[name] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
