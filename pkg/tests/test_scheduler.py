import pytest
from hypothesis import given, strategies as st

from bayesperf.errors import InvalidRequestedSchedule, NoPath, UnknownEvent
from bayesperf.events import (AllowedCounters, Configuration, MutuallyExclusive, Schedule,
                              all_valid_configurations, events_of, validate_configuration)
from bayesperf.relations import RelationFactor, build_factor_graph
from bayesperf.scheduler import (blankets_overlap, condense_common_steps, describe_transform,
                                 remove_redundant_steps, shortest_dependency_path,
                                 summarize_transform, transform_schedule)

from conftest import make_catalog
from oracles import bfs_hops, min_insertions


def C(*names):
    return Configuration(dict(enumerate(names)))


def chain_graph(n_p):
    names = ["a", "b", "c", "d"]
    cat = make_catalog(names, n_p=n_p)
    rels = [RelationFactor("ab", "a", "b"), RelationFactor("bc", "b", "c"),
            RelationFactor("cd", "c", "d")]
    return cat, build_factor_graph(cat, rels)


def test_overlap_examples(fg_graph):
    _, g = fg_graph
    assert blankets_overlap(g, C("e1"), C("e3"))         # both blankets hold e2
    assert blankets_overlap(g, C("e1"), C("e1"))
    assert not blankets_overlap(g, C("e1"), C("e5"))
    # sharing a factor is not enough: B(e1) = {e2}, B(e2) = {e1, e3, e4}
    assert not blankets_overlap(g, C("e1"), C("e2"))
    with pytest.raises(UnknownEvent):
        blankets_overlap(g, C("e1"), C("zz"))


def test_shortest_path_examples(fg_graph):
    cat, g = fg_graph
    assert shortest_dependency_path(g, cat, "e1", "e3") == ["e1", "e2", "e3"]
    assert shortest_dependency_path(g, cat, "e1", "e1") == ["e1"]
    with pytest.raises(NoPath):
        shortest_dependency_path(g, cat, "e1", "e5")


def test_path_skips_unplaceable_events():
    names = ["a", "b", "x", "c"]
    cat = make_catalog(names, n_p=1, fixed=["F"])
    rels = [RelationFactor("r1", "a", "F"), RelationFactor("r2", "F", "c"),
            RelationFactor("r3", "a", "b"), RelationFactor("r4", "b", "x"),
            RelationFactor("r5", "x", "c")]
    g = build_factor_graph(cat, rels)
    # the route through the fixed event is shorter but cannot be scheduled
    assert shortest_dependency_path(g, cat, "a", "c") == ["a", "b", "x", "c"]


def test_path_tie_break_lexicographic():
    cat = make_catalog(["s", "m2", "m1", "t"], n_p=2)
    rels = [RelationFactor("x", "s", "m2"), RelationFactor("y", "m2", "t"),
            RelationFactor("z", "s", "m1"), RelationFactor("w", "m1", "t")]
    g = build_factor_graph(cat, rels)
    assert shortest_dependency_path(g, cat, "s", "t") == ["s", "m1", "t"]


def test_already_linked_unchanged(fg_graph):
    cat, g = fg_graph
    req = Schedule([C("e1", "e2"), C("e2", "e3")])
    assert transform_schedule(g, cat, req) == req
    req = Schedule([C("e1"), C("e3")])
    assert transform_schedule(g, cat, req) == req


def test_single_counter_chain_breaks():
    cat, g = chain_graph(n_p=1)
    out = transform_schedule(g, cat, Schedule([C("a"), C("d")]))
    assert out.breaks == (False, True)
    assert summarize_transform(Schedule([C("a"), C("d")]), out).breaks == 1


def test_bridge_inserted_and_minimal():
    cat, g = chain_graph(n_p=2)
    req = Schedule([C("a"), C("d")])
    out = transform_schedule(g, cat, req)
    assert len(out) == 3 and out.inserted == (False, True, False)
    assert not any(out.breaks)
    scopes = [tuple(f.scope) for f in g.factors]
    valid = [events_of(c) for c in all_valid_configurations(cat)]
    assert min_insertions(scopes, valid, {"a"}, {"d"}) == 1


def test_invalid_requested_slice():
    cat = make_catalog(["a", "b"], n_p=2, constraints=[AllowedCounters("a", {1})])
    g = build_factor_graph(cat, [RelationFactor("r", "a", "b")])
    with pytest.raises(InvalidRequestedSchedule):
        transform_schedule(g, cat, Schedule([Configuration({0: "a"})]))


def test_cyclic_wrap_is_bridged():
    cat, g = chain_graph(n_p=2)
    out = transform_schedule(g, cat, Schedule([C("a"), C("b", "c"), C("d")]), cyclic=True)
    assert blankets_overlap(g, out.slices[-1], out.slices[0]) or out.breaks[0]
    assert "+" in describe_transform(out)


def test_remove_redundant_step():
    cat = make_catalog(["h", "u", "w"], n_p=2)
    g = build_factor_graph(cat, [RelationFactor("p", "h", "u"), RelationFactor("q", "h", "w")])
    # C(u) and C(w) both have blanket union {h}, and C(u) links to C(u, w)
    assert remove_redundant_steps(g, [C("u"), C("w"), C("u", "w")]) == [C("u"), C("u", "w")]
    # not removed when the neighbours would lose their link
    assert remove_redundant_steps(g, [C("u"), C("h"), C("w")]) == [C("u"), C("h"), C("w")]


def test_condense_common_steps():
    cat = make_catalog(["h", "p", "q", "s", "t"], n_p=3)
    rels = [RelationFactor("f1", "h", "p"), RelationFactor("f2", "h", "q"),
            RelationFactor("f3", "s", "p"), RelationFactor("f4", "t", "q")]
    g = build_factor_graph(cat, rels)
    chain = condense_common_steps(g, cat, [C("s", "h"), C("p", "q"), C("t", "h")])
    # p and q share blanket event h, which links to both neighbours
    assert events_of(chain[1]) == {"h"}


# Properties ------------------------------------------------------------------


@st.composite
def scheduling_cases(draw):
    n = draw(st.integers(3, 8))
    names = [f"v{i}" for i in range(n)]
    n_p = draw(st.integers(1, 3))
    cons = []
    for v in names:
        if draw(st.integers(0, 9)) < 3:
            cons.append(AllowedCounters(v, frozenset(draw(
                st.sets(st.integers(0, n_p - 1), min_size=1)))))
    if draw(st.booleans()):
        cons.append(MutuallyExclusive(frozenset(draw(st.sets(st.sampled_from(names),
                                                             min_size=2, max_size=2))), "t"))
    cat = make_catalog(names, n_p=n_p, constraints=cons)
    rels = []
    for i in range(draw(st.integers(0, n))):
        s = draw(st.lists(st.sampled_from(names), min_size=2, max_size=3, unique=True))
        rels.append(RelationFactor(f"f{i}", s[0],
                                   "(add " + " ".join(s[1:]) + ")" if len(s) > 2 else s[1]))
    g = build_factor_graph(cat, rels)
    valid = all_valid_configurations(cat)
    req = draw(st.lists(st.sampled_from(valid), min_size=2, max_size=4))
    return cat, g, valid, Schedule(req)


def check_invariants(g, cat, out, cyclic=False):
    for c in out.slices:
        assert validate_configuration(cat, c)
    for i in range(1, len(out)):
        assert out.breaks[i] or blankets_overlap(g, out.slices[i - 1], out.slices[i])
    if cyclic and len(out) > 1:
        assert out.breaks[0] or blankets_overlap(g, out.slices[-1], out.slices[0])


@given(scheduling_cases(), st.booleans())
def test_transform_invariants(case, cyclic):
    cat, g, _, req = case
    check_invariants(g, cat, transform_schedule(g, cat, req, cyclic), cyclic)


@given(scheduling_cases())
def test_insertions_match_brute_force(case):
    cat, g, valid, req = case
    out = transform_schedule(g, cat, req)
    scopes = [tuple(f.scope) for f in g.factors]
    sets = [events_of(c) for c in valid]
    # walk the requested gaps in the output
    pos = 0
    for i in range(1, len(req)):
        start = pos
        pos += 1
        while out.inserted[pos]:
            pos += 1
        inserted = pos - start - 1
        best = min_insertions(scopes, sets, events_of(req.slices[i - 1]), events_of(req.slices[i]))
        if out.breaks[pos]:
            assert best is None
        else:
            assert inserted == best


@given(scheduling_cases())
def test_transform_idempotent(case):
    cat, g, _, req = case
    once = transform_schedule(g, cat, req)
    assert transform_schedule(g, cat, once) == once


@given(scheduling_cases())
def test_path_length_matches_bfs(case):
    cat, g, _, _ = case
    scopes = [tuple(f.scope) for f in g.factors]
    names = sorted(g.variables)
    for s in names[:3]:
        for t in names[-3:]:
            hops = bfs_hops(scopes, s, t)
            try:
                path = shortest_dependency_path(g, cat, s, t)
            except NoPath:
                # only allowed if unreachable or blocked by placement
                assert hops is None or cat.constraints
                continue
            assert len(path) - 1 >= (hops or 0)
            if not cat.constraints:
                assert len(path) - 1 == hops
