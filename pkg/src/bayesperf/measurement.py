"""Raw counter samples, Linux t_running/t_enabled scaling, and the Student-t
posterior of an event's true value.

Trace CSV (header exactly ``slice,event,counter,value,t_enabled,t_running``)::

    slice,event,counter,value,t_enabled,t_running
    0,L1D_MISS,c2,1812.4,0.125,1.0

Counters are written ``c<i>`` (programmable) or ``f<i>`` (fixed).  Floats
are written with ``repr`` so a read/write round trip is lossless.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import DegenerateTiming, InputError, InsufficientSamples, SchemaMismatch
from .events import CounterId, CounterKind, Schedule, events_of

TRACE_HEADER = ["slice", "event", "counter", "value", "t_enabled", "t_running"]


@dataclass(frozen=True)
class Sample:
    event: str
    counter: CounterId
    value: float
    t_running: float
    t_enabled: float
    slice_index: int

    def __post_init__(self):
        if self.value < 0:
            raise InputError(f"negative count for {self.event}")
        if self.t_enabled > self.t_running:
            raise InputError(f"t_enabled > t_running for {self.event} in slice {self.slice_index}")


def linux_scale(sample: Sample) -> float:
    """Linux multiplexing correction: value * t_running / t_enabled."""
    if sample.t_enabled <= 0:
        raise DegenerateTiming(f"{sample.event}: t_enabled is {sample.t_enabled}")
    return sample.value * sample.t_running / sample.t_enabled


class SampleBatch:
    """Samples grouped by slice and event."""

    def __init__(self, samples=()):
        self._by_slice = defaultdict(lambda: defaultdict(list))
        self._order = []
        for s in samples:
            self.add(s)

    def add(self, sample: Sample):
        self._by_slice[sample.slice_index][sample.event].append(sample)
        self._order.append(sample)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    @property
    def slices(self) -> list:
        return sorted(self._by_slice)

    @property
    def n_slices(self) -> int:
        return max(self._by_slice) + 1 if self._by_slice else 0

    def events_in(self, slice_index: int) -> list:
        return sorted(self._by_slice.get(slice_index, {}))

    def samples(self, slice_index: int, event: str) -> list:
        return list(self._by_slice.get(slice_index, {}).get(event, []))

    def event_names(self) -> list:
        return sorted({s.event for s in self._order})

    def validate(self, schedule: Schedule, catalog=None) -> None:
        """Every programmable sample must be configured in its slice."""
        for s in self._order:
            if s.counter.kind is CounterKind.FIXED:
                continue
            config = schedule.slice_at(s.slice_index)
            if s.event not in events_of(config):
                raise SchemaMismatch(
                    f"sample of {s.event} in slice {s.slice_index} is not in that slice's configuration")
            if config.assignment.get(s.counter.index) != s.event:
                raise SchemaMismatch(f"{s.event} sampled on wrong counter {s.counter.label()}")

    def __eq__(self, other):
        return isinstance(other, SampleBatch) and self._order == other._order


# Summaries and the Student-t posterior ---------------------------------------


@dataclass(frozen=True)
class MeasurementSummary:
    event: str
    N: int
    mu: float
    S: float

    def __post_init__(self):
        if self.N < 1:
            raise InsufficientSamples(f"{self.event}: no samples")
        if self.S < 0:
            raise InputError("sample standard deviation must be non-negative")

    @property
    def nu(self) -> int:
        return self.N - 1


def summarize(values, event: str = "") -> MeasurementSummary:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise InsufficientSamples(f"{event}: no samples")
    S = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return MeasurementSummary(event, int(x.size), float(np.mean(x)), S)


def summarize_samples(samples, event: str = "") -> MeasurementSummary:
    return summarize([linux_scale(s) for s in samples], event)


@dataclass(frozen=True)
class LocationScaleStudentT:
    location: float
    scale: float
    dof: int
    point_mass: bool = False

    def interval(self, level: float = 0.95):
        """Equal-tailed credible interval."""
        if self.point_mass:
            return (self.location, self.location)
        q = stats.t.ppf(0.5 + level / 2.0, self.dof)
        return (self.location - q * self.scale, self.location + q * self.scale)

    def logpdf(self, x):
        if self.point_mass:
            return np.where(np.asarray(x) == self.location, 0.0, -np.inf)
        return stats.t.logpdf(x, self.dof, loc=self.location, scale=self.scale)

    def variance(self) -> float:
        if self.point_mass:
            return 0.0
        if self.dof <= 2:
            return math.inf
        return self.scale ** 2 * self.dof / (self.dof - 2)


def student_t_posterior(summary: MeasurementSummary) -> LocationScaleStudentT:
    """Marginal of the unknown true value with the noise variance integrated
    out: mu + S/sqrt(N) * t(N-1).  Zero sample spread gives a point mass."""
    if summary.N < 2:
        raise InsufficientSamples(f"{summary.event}: need at least 2 samples, got {summary.N}")
    if summary.S == 0:
        return LocationScaleStudentT(summary.mu, 0.0, summary.nu, point_mass=True)
    return LocationScaleStudentT(summary.mu, summary.S / math.sqrt(summary.N), summary.nu)


def slice_summaries(batch: SampleBatch, slice_index: int) -> dict:
    return {e: summarize_samples(batch.samples(slice_index, e), e)
            for e in batch.events_in(slice_index)}


# Trace CSV -------------------------------------------------------------------


def write_trace(batch: SampleBatch, path_or_file) -> None:
    def emit(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for s in batch:
            w.writerow([s.slice_index, s.event, s.counter.label(), repr(float(s.value)),
                        repr(float(s.t_enabled)), repr(float(s.t_running))])

    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, "w", newline="") as fh:
            emit(fh)
    else:
        emit(path_or_file)


def trace_to_string(batch: SampleBatch) -> str:
    buf = io.StringIO()
    write_trace(batch, buf)
    return buf.getvalue()


def read_trace(path_or_file) -> SampleBatch:
    def parse(fh):
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise SchemaMismatch(f"trace header must be {','.join(TRACE_HEADER)}, got {header}")
        batch = SampleBatch()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                slice_s, event, counter, value, t_e, t_r = row
                batch.add(Sample(event, CounterId.parse(counter), float(value), float(t_r),
                                 float(t_e), int(slice_s)))
            except (ValueError, TypeError) as exc:
                raise SchemaMismatch(f"trace line {lineno}: {exc}") from exc
        return batch

    if isinstance(path_or_file, (str, Path)):
        with open(path_or_file, newline="") as fh:
            return parse(fh)
    return parse(path_or_file)
