"""Events, counters, configurations and schedules.

A catalog declares the events of one logical PMU together with the number of
fixed and programmable counters and the placement constraints that decide
which configurations are valid.  Fixed counters always count their event and
are never part of a configuration.

Catalog JSON schema::

    {
      "n_fixed": 3,
      "n_programmable": 4,
      "events": [{"name": "CLKS", "kind": "fixed"},
                 {"name": "L1D_PEND_MISS", "kind": "programmable"}],
      "constraints": [
        {"type": "allowed_counters", "event": "L1D_PEND_MISS", "counters": [2]},
        {"type": "mutually_exclusive", "events": ["OFFCORE_A", "OFFCORE_B"],
         "tag": "offcore_msr"},
        {"type": "capacity_limit", "max_events": 3}
      ]
    }
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from .errors import InputError, InvalidConfiguration, InvalidSchedule, UnknownEvent


class CounterKind(str, enum.Enum):
    FIXED = "fixed"
    PROGRAMMABLE = "programmable"


@dataclass(frozen=True, order=True)
class EventId:
    name: str
    kind: CounterKind = CounterKind.PROGRAMMABLE


@dataclass(frozen=True, order=True)
class CounterId:
    index: int
    kind: CounterKind = CounterKind.PROGRAMMABLE

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("counter index must be non-negative")

    def label(self) -> str:
        return ("f" if self.kind is CounterKind.FIXED else "c") + str(self.index)

    @classmethod
    def parse(cls, text: str) -> "CounterId":
        text = text.strip()
        if text[:1] in ("f", "c") and text[1:].isdigit():
            kind = CounterKind.FIXED if text[0] == "f" else CounterKind.PROGRAMMABLE
            return cls(int(text[1:]), kind)
        if text.isdigit():
            return cls(int(text))
        raise InputError(f"bad counter label {text!r}")


# Placement constraints -------------------------------------------------------


@dataclass(frozen=True)
class AllowedCounters:
    event: str
    counters: frozenset

    def __post_init__(self):
        object.__setattr__(self, "counters", frozenset(int(c) for c in self.counters))
        if not self.counters:
            raise InputError(f"allowed_counters for {self.event} is empty")

    def events(self):
        return frozenset([self.event])

    def to_json(self):
        return {"type": "allowed_counters", "event": self.event,
                "counters": sorted(self.counters)}


@dataclass(frozen=True)
class MutuallyExclusive:
    members: frozenset
    tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))

    def events(self):
        return self.members

    def to_json(self):
        return {"type": "mutually_exclusive", "events": sorted(self.members),
                "tag": self.tag}


@dataclass(frozen=True)
class CapacityLimit:
    max_events: int

    def events(self):
        return frozenset()

    def to_json(self):
        return {"type": "capacity_limit", "max_events": self.max_events}


PlacementConstraint = Union[AllowedCounters, MutuallyExclusive, CapacityLimit]


def _constraint_from_json(obj) -> PlacementConstraint:
    kind = obj.get("type")
    if kind == "allowed_counters":
        return AllowedCounters(obj["event"], frozenset(obj["counters"]))
    if kind == "mutually_exclusive":
        return MutuallyExclusive(frozenset(obj["events"]), obj.get("tag", ""))
    if kind == "capacity_limit":
        return CapacityLimit(int(obj["max_events"]))
    raise InputError(f"unknown constraint type {kind!r}")


# Catalog ---------------------------------------------------------------------


@dataclass(frozen=True)
class EventCatalog:
    events: tuple
    n_fixed: int
    n_programmable: int
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        names = [e.name for e in self.events]
        if len(set(names)) != len(names):
            raise InputError("event names must be unique within a catalog")
        if self.n_fixed < 0 or self.n_programmable < 0:
            raise InputError("counter counts must be non-negative")
        n_fixed_events = sum(e.kind is CounterKind.FIXED for e in self.events)
        if n_fixed_events > self.n_fixed:
            raise InputError(f"{n_fixed_events} fixed events but only {self.n_fixed} fixed counters")
        known = set(names)
        for c in self.constraints:
            for name in c.events():
                if name not in known:
                    raise UnknownEvent(name)
            if isinstance(c, AllowedCounters):
                bad = [i for i in c.counters if not 0 <= i < self.n_programmable]
                if bad:
                    raise InputError(f"allowed_counters for {c.event} references counters {bad}")
        object.__setattr__(self, "_by_name", {e.name: e for e in self.events})

    @property
    def names(self) -> tuple:
        return tuple(e.name for e in self.events)

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def event(self, name: str) -> EventId:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownEvent(name) from None

    def is_fixed(self, name: str) -> bool:
        return self.event(name).kind is CounterKind.FIXED

    def fixed_events(self) -> tuple:
        return tuple(e.name for e in self.events if e.kind is CounterKind.FIXED)

    def programmable_events(self) -> tuple:
        return tuple(e.name for e in self.events if e.kind is CounterKind.PROGRAMMABLE)

    def fixed_counter(self, name: str) -> CounterId:
        return CounterId(self.fixed_events().index(name), CounterKind.FIXED)

    def allowed_counters(self, name: str) -> frozenset:
        """Programmable counters that may host ``name`` (intersection of all
        allowed_counters constraints naming it)."""
        allowed = frozenset(range(self.n_programmable))
        for c in self.constraints:
            if isinstance(c, AllowedCounters) and c.event == name:
                allowed &= c.counters
        return allowed

    def capacity(self) -> int:
        cap = self.n_programmable
        for c in self.constraints:
            if isinstance(c, CapacityLimit):
                cap = min(cap, c.max_events)
        return cap

    def to_json(self) -> dict:
        return {
            "n_fixed": self.n_fixed,
            "n_programmable": self.n_programmable,
            "events": [{"name": e.name, "kind": e.kind.value} for e in self.events],
            "constraints": [c.to_json() for c in self.constraints],
        }

    @classmethod
    def from_json(cls, obj) -> "EventCatalog":
        try:
            events = [EventId(e["name"], CounterKind(e.get("kind", "programmable")))
                      for e in obj["events"]]
            return cls(events, int(obj["n_fixed"]), int(obj["n_programmable"]),
                       [_constraint_from_json(c) for c in obj.get("constraints", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed catalog: {exc}") from exc


def load_catalog(path) -> EventCatalog:
    return EventCatalog.from_json(_read_json(path))


def _read_json(path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


# Configurations --------------------------------------------------------------


@dataclass(frozen=True)
class Configuration:
    """Programmable counter index -> event name for one time slice."""

    assignment: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        items = tuple(sorted((int(k), str(v)) for k, v in dict(self.assignment).items()))
        names = [v for _, v in items]
        if len(set(names)) != len(names):
            raise InvalidConfiguration(f"event placed on more than one counter: {names}")
        object.__setattr__(self, "assignment", dict(items))
        object.__setattr__(self, "_items", items)

    def __hash__(self):
        return hash(self._items)

    def __eq__(self, other):
        return isinstance(other, Configuration) and self._items == other._items

    def __len__(self):
        return len(self._items)

    def __repr__(self):
        inner = ", ".join(f"c{k}->{v}" for k, v in self._items)
        return f"Configuration({{{inner}}})"

    def to_json(self) -> dict:
        return {str(k): v for k, v in self._items}

    @classmethod
    def from_json(cls, obj) -> "Configuration":
        return cls({CounterId.parse(str(k)).index: v for k, v in obj.items()})


def events_of(config: Configuration) -> frozenset:
    return frozenset(config.assignment.values())


@dataclass(frozen=True)
class ValidityReport:
    ok: bool
    reason: str = ""
    event: Optional[str] = None
    constraint: Optional[PlacementConstraint] = None

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return "ok"
        where = f" (event {self.event})" if self.event else ""
        return f"{self.reason}{where}: {self.constraint}"


OK = ValidityReport(True)


def constraint_order(catalog: EventCatalog, names: Iterable[str]) -> list:
    """Most constrained first: fewest allowed counters, then name."""
    return sorted(names, key=lambda n: (len(catalog.allowed_counters(n)), n))


def validate_configuration(catalog: EventCatalog, config: Configuration) -> ValidityReport:
    for name in config.assignment.values():
        catalog.event(name)

    n = len(config)
    if n > catalog.n_programmable:
        return ValidityReport(False, "capacity", None, CapacityLimit(catalog.n_programmable))
    for c in catalog.constraints:
        if isinstance(c, CapacityLimit) and n > c.max_events:
            return ValidityReport(False, "capacity", None, c)

    counter_of = {v: k for k, v in config.assignment.items()}
    seen_tags = {}
    for name in constraint_order(catalog, counter_of):
        counter = counter_of[name]
        if catalog.is_fixed(name):
            return ValidityReport(False, "fixed_event", name, None)
        if not 0 <= counter < catalog.n_programmable:
            return ValidityReport(False, "counter_range", name,
                                  CapacityLimit(catalog.n_programmable))
        for c in catalog.constraints:
            if isinstance(c, AllowedCounters) and c.event == name and counter not in c.counters:
                return ValidityReport(False, "allowed_counters", name, c)
        for c in catalog.constraints:
            if isinstance(c, MutuallyExclusive) and name in c.members:
                if c in seen_tags:
                    return ValidityReport(False, "mutually_exclusive", name, c)
                seen_tags[c] = name
    return OK


def place_events(catalog: EventCatalog, names: Iterable[str]) -> Optional[Configuration]:
    """Find a valid counter assignment for ``names``, or None.

    Events are placed most-constrained first onto the lowest free allowed
    counter, backtracking when a later event cannot be placed.
    """
    names = list(dict.fromkeys(names))
    for name in names:
        catalog.event(name)
    if len(names) > catalog.capacity() or any(catalog.is_fixed(n) for n in names):
        return None
    for c in catalog.constraints:
        if isinstance(c, MutuallyExclusive) and len(c.members & set(names)) > 1:
            return None
    order = constraint_order(catalog, names)
    options = [sorted(catalog.allowed_counters(n)) for n in order]
    used = set()
    chosen = []

    def search(i):
        if i == len(order):
            return True
        for counter in options[i]:
            if counter not in used:
                used.add(counter)
                chosen.append(counter)
                if search(i + 1):
                    return True
                used.discard(counter)
                chosen.pop()
        return False

    if not search(0):
        return None
    return Configuration(dict(zip(chosen, order)))


def is_placeable(catalog: EventCatalog, name: str) -> bool:
    return place_events(catalog, [name]) is not None


# Schedules -------------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Ordered configurations, one per time slice.

    ``breaks[i]`` marks a chain break before slice ``i``; ``breaks[0]``
    refers to the wrap-around from the last slice when the schedule is
    repeated cyclically.  ``inserted`` flags slices added by the scheduler
    and is informational only.
    """

    slices: tuple
    slice_duration: float = 1.0
    breaks: tuple = ()
    inserted: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        if not self.slices:
            raise InvalidSchedule("schedule must contain at least one slice")
        breaks = tuple(bool(b) for b in self.breaks) or (False,) * len(self.slices)
        inserted = tuple(bool(b) for b in self.inserted) or (False,) * len(self.slices)
        if len(breaks) != len(self.slices) or len(inserted) != len(self.slices):
            raise InvalidSchedule("breaks/inserted must match the number of slices")
        if self.slice_duration <= 0:
            raise InvalidSchedule("slice_duration must be positive")
        object.__setattr__(self, "breaks", breaks)
        object.__setattr__(self, "inserted", inserted)

    def __len__(self):
        return len(self.slices)

    def slice_at(self, t: int) -> Configuration:
        """Configuration active in slice ``t`` when the schedule repeats."""
        return self.slices[t % len(self.slices)]

    def break_at(self, t: int) -> bool:
        if t <= 0:
            return False
        return self.breaks[t % len(self.slices)]

    def validate(self, catalog: EventCatalog) -> None:
        for i, config in enumerate(self.slices):
            report = validate_configuration(catalog, config)
            if not report:
                raise InvalidSchedule(f"slice {i}: {report.describe()}")

    def to_json(self) -> dict:
        return {
            "slice_duration": self.slice_duration,
            "slices": [{"assignments": c.to_json(), "break_before": b}
                       for c, b in zip(self.slices, self.breaks)],
        }

    @classmethod
    def from_json(cls, obj) -> "Schedule":
        try:
            slices = [Configuration.from_json(s["assignments"]) for s in obj["slices"]]
            breaks = [bool(s.get("break_before", False)) for s in obj["slices"]]
            return cls(slices, float(obj.get("slice_duration", 1.0)), breaks)
        except (KeyError, TypeError, AttributeError) as exc:
            raise InputError(f"malformed schedule: {exc}") from exc


def load_schedule(path) -> Schedule:
    return Schedule.from_json(_read_json(path))


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def round_robin(catalog: EventCatalog, events=None, slice_duration: float = 1.0) -> Schedule:
    """Linux-style requested schedule: groups of up to n_p events in order."""
    names = [n for n in (events or catalog.programmable_events())]
    per = max(1, catalog.capacity())
    slices = []
    pending = list(names)
    while pending:
        group = []
        for name in list(pending):
            if len(group) == per:
                break
            if place_events(catalog, group + [name]) is not None:
                group.append(name)
                pending.remove(name)
        if not group:
            raise InvalidSchedule(f"events cannot be placed: {pending}")
        slices.append(place_events(catalog, group))
    return Schedule(slices, slice_duration)


def all_valid_configurations(catalog: EventCatalog, universe=None, max_size=None):
    """Every placeable event set (as a Configuration), smallest first."""
    names = sorted(universe if universe is not None else catalog.programmable_events())
    cap = catalog.capacity() if max_size is None else min(max_size, catalog.capacity())
    out = []
    for size in range(1, cap + 1):
        for combo in itertools.combinations(names, size):
            config = place_events(catalog, combo)
            if config is not None:
                out.append(config)
    return out
