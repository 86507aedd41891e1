"""Synthetic PMU: ground-truth event streams and the samples a perf-style
multiplexer would record from them.

Time is divided into slices of ``slice_duration``.  Free events follow a
piecewise-constant rate per workload phase (optionally with a multiplicative
random-walk drift); derived events are computed from the relations, so every
relation holds exactly in the ground truth.

Sampling model, per slice of duration D:

* ``n`` interrupts fire per slice, ``n = max(1, floor(trigger / threshold))``
  where ``trigger`` is the truth of ``trigger_event`` in that slice, or D if
  no trigger event is named.
* A multiplexed event sees each interrupt interval with ``t_running = D`` and
  ``t_enabled = D / n`` and reports ``truth * (t_enabled / t_running)`` times
  ``1 + bias + relative_sigma * N(0, 1)`` (clipped at zero), so
  ``linux_scale`` gives ``truth * (1 + bias + noise)``.
* Polled and fixed events are enabled the whole time (``t_enabled =
  t_running = D``) and report ``truth * (1 + bias + noise)`` per interrupt.
* With probability ``dropout_prob`` all samples of an event in a slice are lost.

Scenario JSON::

    {"catalog": "catalog.json", "relations": "relations.json",
     "n_slices": 200, "seed": 7,
     "workload": {"phases": [{"duration": 60, "base_rates": {"E1": 2.0e6}}],
                  "drift": 0.01},
     "noise": {"relative_sigma": 0.2, "bias": 0.0, "dropout_prob": 0.0},
     "policy": {"mode": "multiplexed", "threshold": 1.0e6, "slice_duration": 1.0,
                "trigger_event": "CLKS", "schedule": "auto", "events": null,
                "polled_events": null}}

``catalog``/``relations``/``schedule`` may be inline objects or paths
relative to the scenario file; ``"auto"`` builds a round-robin schedule over
``events`` (default: every programmable event) and bridges it cyclically.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InputError, InvalidSchedule, RelationInconsistent, SchemaMismatch
from .events import (CounterId, CounterKind, EventCatalog, Schedule, events_of, round_robin)
from .measurement import Sample, SampleBatch
from .relations import FactorGraph, Var, build_factor_graph, relations_from_json

TRUTH_HEADER = ["slice", "event", "value"]


@dataclass(frozen=True)
class Phase:
    duration: float
    base_rates: dict


@dataclass
class WorkloadModel:
    phases: list
    relations: list = field(default_factory=list)
    seed: int = 0
    drift: float = 0.0      # per-slice sd of the log-rate random walk

    @property
    def total_duration(self) -> float:
        return float(sum(p.duration for p in self.phases))


@dataclass(frozen=True)
class NoiseModel:
    relative_sigma: float = 0.0
    bias: float = 0.0
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.relative_sigma < 0:
            raise InputError("relative_sigma must be non-negative")
        if not 0 <= self.dropout_prob < 1:
            raise InputError("dropout_prob must lie in [0, 1)")


@dataclass(frozen=True)
class SamplingPolicy:
    mode: str = "multiplexed"
    threshold: float = 1.0
    slice_duration: float = 1.0
    schedule: Optional[Schedule] = None
    polled_events: tuple = ()
    trigger_event: Optional[str] = None

    def __post_init__(self):
        if self.mode not in ("polling", "multiplexed"):
            raise InputError(f"unknown sampling mode {self.mode!r}")
        if not self.threshold > 0:
            raise InputError("threshold must be positive")
        if not self.slice_duration > 0:
            raise InputError("slice_duration must be positive")


@dataclass
class GroundTruth:
    values: dict            # event -> array over slices
    slice_duration: float = 1.0

    @property
    def n_slices(self) -> int:
        return len(next(iter(self.values.values()))) if self.values else 0

    @property
    def events(self) -> list:
        return sorted(self.values)

    def at(self, t: int) -> dict:
        return {e: float(v[t]) for e, v in self.values.items()}

    def __eq__(self, other):
        return (isinstance(other, GroundTruth) and self.values.keys() == other.values.keys()
                and all(np.array_equal(self.values[e], other.values[e]) for e in self.values))


# Ground truth ----------------------------------------------------------------


def _derivation_order(relations, free):
    """(event, factor, expression) triples computing derived events in order."""
    known = set(free)
    steps = []
    pending = list(relations)
    progressed = True
    while pending and progressed:
        progressed = False
        for f in list(pending):
            target = None
            for side, other in ((f.lhs, f.rhs), (f.rhs, f.lhs)):
                if (isinstance(side, Var) and side.name not in known
                        and other.variables() <= known):
                    target = (side.name, other)
                    break
            if target is not None:
                steps.append((target[0], f, target[1]))
                known.add(target[0])
                pending.remove(f)
                progressed = True
            elif f.scope <= known:
                pending.remove(f)
                progressed = True
    return steps, known


def generate_ground_truth(workload: WorkloadModel, horizon: int,
                          slice_duration: float = 1.0, events=None) -> GroundTruth:
    """True per-slice counts for every event, ``horizon`` slices long."""
    if horizon <= 0:
        return GroundTruth({}, slice_duration)
    if horizon * slice_duration > workload.total_duration + 1e-9 * slice_duration:
        raise InputError(f"phases cover {workload.total_duration} time units, "
                         f"horizon needs {horizon * slice_duration}")
    free = sorted({e for p in workload.phases for e in p.base_rates})
    for p in workload.phases:
        if set(p.base_rates) != set(free):
            raise InputError("every phase must give a rate for the same free events")
        if any(r < 0 for r in p.base_rates.values()):
            raise InputError("rates must be non-negative")

    ends = np.cumsum([p.duration for p in workload.phases])
    mid = (np.arange(horizon) + 0.5) * slice_duration
    phase_of = np.searchsorted(ends, mid, side="right")
    rng = np.random.default_rng(workload.seed)
    values = {}
    for e in free:
        rates = np.array([workload.phases[k].base_rates[e] for k in phase_of], dtype=float)
        if workload.drift > 0:
            walk = np.cumsum(rng.normal(0.0, workload.drift, horizon))
            rates = rates * np.exp(walk - walk.mean())
        values[e] = rates * slice_duration

    steps, known = _derivation_order(workload.relations, free)
    for name, _, expr in steps:
        values[name] = np.asarray(expr.evaluate(values, _params_of(workload, name)), dtype=float)
        if values[name].ndim == 0:
            values[name] = np.full(horizon, float(values[name]))
    for f in workload.relations:
        if not f.scope <= known:
            raise InputError(f"relation {f.id} involves events with no rate and no derivation")
        if np.any(f.residual(values) != 0):
            raise RelationInconsistent(f"relation {f.id} does not hold for the given rates")
    if events is not None:
        missing = set(events) - known
        if missing:
            raise InputError(f"no rate or derivation for {sorted(missing)}")
    return GroundTruth(values, slice_duration)


def _params_of(workload, name):
    for f in workload.relations:
        if name in f.scope:
            return f.params
    return {}


# Sampling --------------------------------------------------------------------


def _interrupts(truth: GroundTruth, policy: SamplingPolicy, t: int) -> int:
    if policy.trigger_event is None:
        base = policy.slice_duration
    else:
        base = truth.values[policy.trigger_event][t]
    return max(1, int(math.floor(base / policy.threshold)))


def _count_for(target: float, t_running: float, t_enabled: float) -> float:
    """Raw count whose Linux-scaled value is ``target``, to the last bit when possible.

    ``target * t_enabled / t_running`` can be one ulp off after scaling back,
    so nudge it a few ulps either way until the round trip is exact.
    """
    v = target * t_enabled / t_running
    if v * t_running / t_enabled == target:
        return v
    for direction in (math.inf, -math.inf):
        w = v
        for _ in range(4):
            w = math.nextafter(w, direction)
            if w >= 0 and w * t_running / t_enabled == target:
                return w
    return v


def sample_trace(truth: GroundTruth, policy: SamplingPolicy, noise: NoiseModel,
                 catalog: EventCatalog, seed: int = 0) -> SampleBatch:
    """Samples recorded from ``truth`` under ``policy``; deterministic per seed."""
    rng = np.random.default_rng(seed)
    D = policy.slice_duration
    fixed = [e for e in catalog.fixed_events() if e in truth.values]
    if policy.mode == "multiplexed":
        if policy.schedule is None:
            raise InvalidSchedule("multiplexed sampling needs a schedule")
        policy.schedule.validate(catalog)
    else:
        polled = list(policy.polled_events)
        if len(polled) > catalog.capacity():
            raise InvalidSchedule(f"cannot poll {len(polled)} events on {catalog.capacity()} counters")
        from .events import place_events
        poll_config = place_events(catalog, polled)
        if poll_config is None:
            raise InvalidSchedule(f"polled events {polled} cannot be placed together")
    batch = SampleBatch()
    for t in range(truth.n_slices):
        n = _interrupts(truth, policy, t)
        if policy.mode == "multiplexed":
            config = policy.schedule.slice_at(t)
            share = 1.0 / n
        else:
            config = poll_config
            share = 1.0
        observed = [(e, catalog.fixed_counter(e), 1.0) for e in fixed]
        observed += [(e, CounterId(c, CounterKind.PROGRAMMABLE), share)
                     for c, e in sorted(config.assignment.items())]
        for e, counter, frac in observed:
            z = rng.standard_normal(n)
            if noise.dropout_prob > 0 and rng.random() < noise.dropout_prob:
                continue
            if e not in truth.values:
                raise InputError(f"no ground truth for scheduled event {e}")
            true = truth.values[e][t]
            targets = np.maximum(true * (1.0 + noise.bias + noise.relative_sigma * z), 0.0)
            t_en = D * frac
            for target in targets:
                batch.add(Sample(e, counter, _count_for(float(target), D, t_en), D, t_en, t))
    return batch


# Truth CSV -------------------------------------------------------------------


def write_truth(truth: GroundTruth, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRUTH_HEADER)
        for t in range(truth.n_slices):
            for e in truth.events:
                w.writerow([t, e, repr(float(truth.values[e][t]))])


def read_truth(path, slice_duration: float = 1.0) -> GroundTruth:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != TRUTH_HEADER:
            raise SchemaMismatch(f"truth header must be {','.join(TRUTH_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, e, v = int(row[0]), row[1], float(row[2])
            except (ValueError, IndexError) as exc:
                raise SchemaMismatch(f"truth line {lineno}: {exc}") from exc
            rows.setdefault(e, {})[t] = v
    if not rows:
        return GroundTruth({}, slice_duration)
    n = max(max(d) for d in rows.values()) + 1
    values = {}
    for e, d in rows.items():
        if len(d) != n:
            raise SchemaMismatch(f"truth for {e} does not cover slices 0..{n - 1}")
        values[e] = np.array([d[t] for t in range(n)])
    return GroundTruth(values, slice_duration)


# Scenarios -------------------------------------------------------------------


@dataclass
class Scenario:
    catalog: EventCatalog
    relations: list
    graph: FactorGraph
    workload: WorkloadModel
    noise: NoiseModel
    policy: SamplingPolicy
    n_slices: int
    seed: int = 0
    events: Optional[tuple] = None      # events the schedule rotates through

    def run(self, seed: Optional[int] = None):
        """(truth, samples) for this scenario; ``seed`` overrides the trace seed."""
        truth = generate_ground_truth(self.workload, self.n_slices,
                                      self.policy.slice_duration, self.catalog.names)
        s = self.seed if seed is None else seed
        batch = sample_trace(truth, self.policy, self.noise, self.catalog, seed=s + 1)
        return truth, batch


def _load_part(value, base: Path):
    if isinstance(value, str):
        path = base / value
        text = path.read_text()
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return value


def auto_schedule(catalog, graph, events=None, slice_duration=1.0) -> Schedule:
    from .scheduler import transform_schedule

    requested = round_robin(catalog, events, slice_duration)
    return transform_schedule(graph, catalog, requested, cyclic=True)


def scenario_from_json(obj, base=".") -> Scenario:
    base = Path(base)
    try:
        catalog = EventCatalog.from_json(_load_part(obj["catalog"], base))
        relations = relations_from_json(_load_part(obj["relations"], base))
        graph = build_factor_graph(catalog, relations)
        w = obj["workload"]
        seed = int(obj.get("seed", 0))
        phases = [Phase(float(p["duration"]), {k: float(v) for k, v in p["base_rates"].items()})
                  for p in w["phases"]]
        workload = WorkloadModel(phases, relations, seed, float(w.get("drift", 0.0)))
        noise = NoiseModel(**obj.get("noise", {}))
        p = dict(obj.get("policy", {}))
        duration = float(p.get("slice_duration", 1.0))
        events = tuple(p["events"]) if p.get("events") else None
        mode = p.get("mode", "multiplexed")
        schedule = None
        if mode == "multiplexed":
            spec = p.get("schedule", "auto")
            if spec == "auto":
                schedule = auto_schedule(catalog, graph, events, duration)
            else:
                schedule = Schedule.from_json(_load_part(spec, base))
        policy = SamplingPolicy(mode, float(p.get("threshold", 1.0)), duration, schedule,
                                tuple(p.get("polled_events") or ()), p.get("trigger_event"))
        n_slices = int(obj.get("n_slices", round(workload.total_duration / duration)))
    except KeyError as exc:
        raise InputError(f"scenario is missing field {exc}") from exc
    except TypeError as exc:
        raise InputError(f"malformed scenario: {exc}") from exc
    return Scenario(catalog, relations, graph, workload, noise, policy, n_slices, seed, events)


def load_scenario(path) -> Scenario:
    path = Path(path)
    return scenario_from_json(_load_part(path.name, path.parent), path.parent)


def polling_variant(scenario: Scenario, events) -> Scenario:
    """Same workload observed by polling ``events`` (at most one PMU's worth)."""
    policy = SamplingPolicy("polling", scenario.policy.threshold, scenario.policy.slice_duration,
                            None, tuple(events), scenario.policy.trigger_event)
    return Scenario(scenario.catalog, scenario.relations, scenario.graph, scenario.workload,
                    scenario.noise, policy, scenario.n_slices, scenario.seed, scenario.events)


def configured_events(schedule: Schedule) -> list:
    out = set()
    for c in schedule.slices:
        out |= events_of(c)
    return sorted(out)
