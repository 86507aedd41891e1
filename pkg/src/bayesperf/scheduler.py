"""Rewrite a requested multiplexing schedule so that consecutive slices stay
statistically linked.

Two configurations are *linked* when they share an event or when the Markov
blankets of their event sets intersect.  For every requested pair that is
not linked, the scheduler inserts the fewest valid bridge configurations that
link them, preferring bridges made of contiguous runs of the shortest
dependency path between the two slices in the factor graph.  When no bridge chain exists the pair is separated by a break marker
and inference treats the two sides as independent chains.
"""

from __future__ import annotations

import functools
import heapq
import itertools
import logging
from collections import deque
from dataclasses import dataclass

from .errors import InvalidRequestedSchedule, NoPath, UnknownEvent
from .events import (Configuration, EventCatalog, Schedule, all_valid_configurations, events_of,
                     is_placeable, place_events, validate_configuration)
from .relations import FactorGraph, event_blanket_union, markov_blanket

log = logging.getLogger(__name__)


def _check_events(graph, names):
    for n in names:
        if n not in graph:
            raise UnknownEvent(n)


def blankets_overlap(graph: FactorGraph, a: Configuration, b: Configuration) -> bool:
    ea, eb = _as_events(a), _as_events(b)
    _check_events(graph, ea | eb)
    if ea & eb:
        return True
    return bool(markov_blanket(graph, ea) & markov_blanket(graph, eb))


def _as_events(c) -> frozenset:
    return events_of(c) if isinstance(c, Configuration) else frozenset(c)


def shortest_dependency_path(graph: FactorGraph, catalog: EventCatalog,
                             source: str, target: str) -> list:
    """Minimum-hop event path from ``source`` to ``target`` through factors.

    Dijkstra over the bipartite graph with unit edge cost.  Intermediate
    events must be placeable on some programmable counter.  Among equally
    short paths the one whose event-name sequence sorts first wins, then the
    one whose factor-id sequence sorts first.
    """
    _check_events(graph, (source, target))
    if source == target:
        return [source]
    # priority: (edges traversed, event names, factor ids)
    heap = [(0, (source,), ())]
    settled = set()
    while heap:
        dist, names, fids = heapq.heappop(heap)
        node = names[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == target:
            return list(names)
        if node != source and not is_placeable(catalog, node):
            continue
        for factor in sorted(graph.factors_of(node), key=lambda f: f.id):
            for nxt in sorted(factor.scope):
                if nxt == node or nxt in settled:
                    continue
                heapq.heappush(heap, (dist + 2, names + (nxt,), fids + (factor.id,)))
    raise NoPath(f"no valid dependency path from {source} to {target}")


def best_dependency_path(graph, catalog, sources, targets) -> list:
    """Shortest path over all endpoint pairs, same tie-breaking."""
    best = None
    for s in sorted(sources):
        for t in sorted(targets):
            try:
                path = shortest_dependency_path(graph, catalog, s, t)
            except NoPath:
                continue
            key = (len(path), tuple(path))
            if best is None or key < best[0]:
                best = (key, path)
    if best is None:
        raise NoPath(f"no dependency path between {sorted(sources)} and {sorted(targets)}")
    return best[1]


def path_segments(catalog: EventCatalog, path) -> list:
    """Valid configurations made of contiguous runs of ``path``.

    Ordered longest first, then by start position, which gives the greedy
    "path event plus next hops" fill preference when several bridges tie.
    """
    cap = catalog.capacity()
    out = []
    for length in range(min(cap, len(path)), 0, -1):
        for start in range(0, len(path) - length + 1):
            config = place_events(catalog, path[start:start + length])
            if config is not None:
                out.append(config)
    return out


@functools.lru_cache(maxsize=8)
def _valid_configurations(catalog: EventCatalog, universe: tuple) -> tuple:
    return tuple(all_valid_configurations(catalog, universe))


def bridge(graph, catalog, a: Configuration, b: Configuration) -> list:
    """Fewest bridge configurations linking ``a`` to ``b``.

    Breadth-first search over every valid configuration, so the chain is as
    short as any valid chain can be.  Candidates built from contiguous runs
    of the shortest dependency path come first, which makes them win ties;
    the rest follow in a fixed order.  Raises NoPath when no chain exists.
    """
    try:
        path = best_dependency_path(graph, catalog, events_of(a), events_of(b))
        preferred = path_segments(catalog, path)
    except NoPath:
        path, preferred = None, []
    universe = tuple(sorted(n for n in catalog.programmable_events() if n in graph))
    seen = set(preferred)
    candidates = preferred + [c for c in _valid_configurations(catalog, universe)
                              if c not in seen]
    blanket = {}

    def key(c):
        if c not in blanket:
            ev = events_of(c)
            blanket[c] = (ev, markov_blanket(graph, ev))
        return blanket[c]

    def linked(x, y):
        ex, bx = key(x)
        ey, by = key(y)
        return bool(ex & ey) or bool(bx & by)

    parent = {a: None}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        if linked(cur, b):
            chain = []
            while parent[cur] is not None:
                chain.append(cur)
                cur = parent[cur]
            return chain[::-1]
        for nxt in candidates:
            if nxt not in parent and linked(cur, nxt):
                parent[nxt] = cur
                queue.append(nxt)
    raise NoPath(f"no valid bridge between {a} and {b}"
                 + (f" along {path}" if path else ""))


# Pruning rules ---------------------------------------------------------------


def remove_redundant_steps(graph, chain) -> list:
    """Drop an intermediate step whose blanket union equals its predecessor's.

    ``chain`` includes both fixed ends; only interior entries are removed, and
    only when the neighbours of the removed step remain linked.
    """
    chain = list(chain)
    i = 1
    while i < len(chain) - 1:
        prev, cur, nxt = chain[i - 1], chain[i], chain[i + 1]
        same = (event_blanket_union(graph, events_of(prev))
                == event_blanket_union(graph, events_of(cur)))
        if same and blankets_overlap(graph, prev, nxt):
            del chain[i]
        else:
            i += 1
    return chain


def condense_common_steps(graph, catalog, chain) -> list:
    """Replace a group of events sharing a blanket event ``e*`` by ``e*``.

    Interior steps only; a replacement is kept only if the new configuration
    is valid and still linked to both neighbours.
    """
    chain = list(chain)
    for i in range(1, len(chain) - 1):
        events = sorted(events_of(chain[i]))
        done = False
        for size in range(len(events), 1, -1):
            for group in itertools.combinations(events, size):
                common = set.intersection(*(set(graph.neighbours(e)) for e in group))
                for star in sorted(common):
                    kept = [e for e in events if e not in group]
                    new_events = kept + ([star] if star not in kept else [])
                    config = place_events(catalog, new_events)
                    if (config is not None
                            and blankets_overlap(graph, chain[i - 1], config)
                            and blankets_overlap(graph, config, chain[i + 1])):
                        chain[i] = config
                        done = True
                        break
                if done:
                    break
            if done:
                break
    return chain


# Transform -------------------------------------------------------------------


@dataclass
class TransformSummary:
    requested: int
    inserted: int
    breaks: int


def transform_schedule(graph: FactorGraph, catalog: EventCatalog, requested: Schedule,
                       cyclic: bool = False) -> Schedule:
    """Insert bridge slices so every adjacent pair is linked or broken.

    With ``cyclic`` the wrap-around from the last slice back to the first is
    bridged too (bridges are appended at the end), and ``breaks[0]`` records
    a break across the wrap.
    """
    for i, config in enumerate(requested.slices):
        report = validate_configuration(catalog, config)
        if not report:
            raise InvalidRequestedSchedule(i, report)
        _check_events(graph, events_of(config))

    slices = [requested.slices[0]]
    breaks = [False]
    inserted = [requested.inserted[0]]
    n = len(requested)
    gaps = n if cyclic and n > 1 else n - 1
    for i in range(gaps):
        a = requested.slices[i]
        b = requested.slices[(i + 1) % n]
        wrap = i + 1 == n
        forced_break = requested.breaks[(i + 1) % n]
        new, brk = [], forced_break
        if not forced_break and not blankets_overlap(graph, a, b):
            try:
                chain = bridge(graph, catalog, a, b)
                chain = remove_redundant_steps(graph, [a] + chain + [b])
                chain = condense_common_steps(graph, catalog, chain)[1:-1]
                new = chain
            except NoPath as exc:
                log.info("chain break before requested slice %d: %s", (i + 1) % n, exc)
                brk = True
        slices.extend(new)
        inserted.extend([True] * len(new))
        breaks.extend([False] * len(new))
        if wrap:
            breaks[0] = brk
        else:
            slices.append(b)
            breaks.append(brk)
            inserted.append(requested.inserted[i + 1])
    out = Schedule(slices, requested.slice_duration, breaks, inserted)
    _check_output(graph, catalog, out, cyclic)
    return out


def _check_output(graph, catalog, schedule, cyclic):
    for config in schedule.slices:
        assert validate_configuration(catalog, config), config
    pairs = list(zip(range(len(schedule)), range(1, len(schedule))))
    if cyclic and len(schedule) > 1:
        pairs.append((len(schedule) - 1, 0))
    for i, j in pairs:
        if not schedule.breaks[j]:
            assert blankets_overlap(graph, schedule.slices[i], schedule.slices[j]), (i, j)


def summarize_transform(requested: Schedule, out: Schedule) -> TransformSummary:
    return TransformSummary(len(requested), sum(out.inserted) - sum(requested.inserted),
                            sum(out.breaks))


def describe_transform(out: Schedule) -> str:
    """Human-readable listing marking inserted slices and breaks."""
    lines = []
    for i, (config, brk, ins) in enumerate(zip(out.slices, out.breaks, out.inserted)):
        if brk:
            lines.append("  ---- break ----")
        mark = "+" if ins else " "
        body = ", ".join(f"c{k}={v}" for k, v in sorted(config.assignment.items()))
        lines.append(f"{mark} {i:4d}  {body}")
    return "\n".join(lines)
