"""Error metrics, the outlier-drop baseline, and comparison reports.

Per event, each correction method yields one value per slice:

* ``linux``: mean of the linux-scaled samples in the slice; slices without
  samples hold the last value (the first observed value before any sample).
* ``outlier_drop``: robust-z outliers among an event's observed slice values
  replaced by the local median, then held like ``linux``.
* ``bayesperf``: the posterior mean (MLE) per slice, held the same way.

Against ground truth the series are compared slice by slice.  The
polling-vs-sampling protocol, where no ground truth exists, aligns series by
dynamic time warping and divides by the error between two polling runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySeries, InputError, SchemaMismatch, ZeroReference
from .measurement import SampleBatch, linux_scale

METHODS = ("linux", "outlier_drop", "bayesperf")
REPORT_HEADER = ["event", "method", "error", "normalized_error", "n_pairs"]
MEAN_ROW = "__mean__"
WEIGHTED_ROW = "__weighted__"


# DTW -------------------------------------------------------------------------


def dtw_align(a, b):
    """L1 dynamic time warping; returns (distance, path of (i, j) pairs).

    Ties in the backtrack prefer the diagonal move, then (i-1, j), then
    (i, j-1).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptySeries("dtw_align needs two non-empty series")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), math.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        moves = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j),
                 (acc[i, j - 1], i, j - 1)]
        best = min(v for v, _, _ in moves)
        for v, pi, pj in moves:
            if v == best:
                i, j = pi, pj
                break
        path.append((i - 1, j - 1))
    return float(acc[n, m]), path[::-1]


def measurement_error(candidate, reference, align: str = "dtw", normalization: float = 1.0):
    """Mean |c - r| / |r| over aligned pairs, divided by ``normalization``.

    Pairs with a zero reference are skipped.  Returns (error, n_pairs).
    """
    c = np.asarray(candidate, dtype=float)
    r = np.asarray(reference, dtype=float)
    if c.size == 0 or r.size == 0:
        raise EmptySeries("measurement_error needs non-empty series")
    if not normalization > 0:
        raise InputError("normalization must be positive")
    if align == "dtw":
        _, path = dtw_align(c, r)
        idx = np.array(path)
        c, r = c[idx[:, 0]], r[idx[:, 1]]
    elif align == "pointwise":
        if c.size != r.size:
            raise SchemaMismatch(f"pointwise comparison of lengths {c.size} and {r.size}")
    else:
        raise InputError(f"unknown alignment {align!r}")
    keep = r != 0
    if not keep.any():
        raise ZeroReference("reference series is all zero")
    err = float(np.mean(np.abs(c[keep] - r[keep]) / np.abs(r[keep])))
    return err / normalization, int(keep.sum())


# Baselines -------------------------------------------------------------------


def outlier_drop_baseline(series, window: int = 5, z_threshold: float = 3.0):
    """Replace values whose robust z-score in a centered window exceeds
    ``z_threshold`` by that window's median.

    robust z = |x - median| / (1.4826 * MAD); a window with MAD 0 flags
    every value that differs from its median.  Windows are truncated at the
    series ends.
    """
    if window < 3:
        raise InputError("window must be at least 3")
    x = np.asarray(series, dtype=float)
    out = x.copy()
    half = window // 2
    for i in range(x.size):
        w = x[max(0, i - half): i + half + 1]
        med = np.median(w)
        mad = np.median(np.abs(w - med))
        if mad == 0:
            flagged = x[i] != med
        else:
            flagged = abs(x[i] - med) / (1.4826 * mad) > z_threshold
        if flagged:
            out[i] = med
    return out


def hold_fill(values: dict, n_slices: int):
    """Series over ``n_slices`` from sparse {slice: value}; gaps hold the last
    value, leading gaps take the first value.  None when ``values`` is empty."""
    if not values:
        return None
    out = np.empty(n_slices)
    first = values[min(values)]
    last = first
    for t in range(n_slices):
        if t in values:
            last = values[t]
        out[t] = last
    return out


def linux_values(batch: SampleBatch) -> dict:
    """{event: {slice: mean linux-scaled value}} for observed slices only."""
    per = defaultdict(dict)
    for t in batch.slices:
        for e in batch.events_in(t):
            per[e][t] = float(np.mean([linux_scale(s) for s in batch.samples(t, e)]))
    return dict(per)


def linux_series(batch: SampleBatch, n_slices: int) -> dict:
    return {e: hold_fill(v, n_slices) for e, v in linux_values(batch).items()}


def posterior_series(posteriors, n_slices: int) -> dict:
    per = defaultdict(dict)
    for p in posteriors:
        per[p.event][p.slice_index] = p.mle
    return {e: hold_fill(v, n_slices) for e, v in per.items()}


def outlier_series(batch: SampleBatch, n_slices: int, window: int = 5,
                   z_threshold: float = 3.0) -> dict:
    """Outlier-drop applied to each event's sequence of observed slice
    values (not to the held series, whose repeats would hide outliers)."""
    out = {}
    for e, values in linux_values(batch).items():
        slices = sorted(values)
        seq = [values[t] for t in slices]
        if len(seq) >= 3:
            seq = outlier_drop_baseline(seq, window, z_threshold)
        out[e] = hold_fill(dict(zip(slices, seq)), n_slices)
    return out


# Reports ---------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    event: str
    method: str
    error: float
    normalized_error: float
    n_pairs: int


@dataclass
class ErrorReport:
    rows: list = field(default_factory=list)
    normalization: float = 1.0

    def error(self, method: str, event: str = MEAN_ROW) -> float:
        for r in self.rows:
            if r.method == method and r.event == event:
                return r.error
        raise KeyError((event, method))

    def per_event(self, method: str) -> dict:
        return {r.event: r.error for r in self.rows
                if r.method == method and not r.event.startswith("__")}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.event, r.method, repr(r.error), repr(r.normalized_error), r.n_pairs])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ErrorReport":
        reader = csv.reader(io.StringIO(text))
        if next(reader, None) != REPORT_HEADER:
            raise SchemaMismatch(f"report header must be {','.join(REPORT_HEADER)}")
        rows = []
        for row in reader:
            if row:
                rows.append(ReportRow(row[0], row[1], float(row[2]), float(row[3]), int(row[4])))
        norm = 1.0
        for r in rows:
            if r.error > 0 and r.normalized_error > 0:
                norm = r.error / r.normalized_error
                break
        return cls(rows, norm)

    def to_json(self) -> dict:
        return {"normalization": self.normalization,
                "rows": [{"event": r.event, "method": r.method, "error": r.error,
                          "normalized_error": r.normalized_error, "n_pairs": r.n_pairs}
                         for r in self.rows]}

    def write(self, out_dir) -> tuple:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return csv_path, json_path


def build_report(truth, corrections: dict, events=None, align: str = "pointwise",
                 normalization: float = 1.0) -> ErrorReport:
    """Compare each method's series against ``truth`` event by event.

    ``truth`` maps event -> reference series (a GroundTruth also works);
    ``corrections`` maps method -> {event: series}.  Events default to those
    every method covers.  Aggregate rows hold the unweighted mean across
    events and the pair-weighted mean.
    """
    ref = truth.values if hasattr(truth, "values") and not isinstance(truth, dict) else truth
    if events is None:
        common = set(ref)
        for series in corrections.values():
            common &= {e for e, s in series.items() if s is not None}
        events = sorted(common)
    rows = []
    for method in corrections:
        errs, pairs = [], []
        for e in events:
            if e not in ref:
                raise SchemaMismatch(f"no reference series for {e}")
            series = corrections[method].get(e)
            if series is None:
                raise SchemaMismatch(f"method {method} has no series for {e}")
            r = np.asarray(ref[e], dtype=float)
            c = np.asarray(series, dtype=float)
            if align == "pointwise" and c.size != r.size:
                raise SchemaMismatch(f"{method}/{e}: {c.size} values vs {r.size} reference values")
            raw, n = measurement_error(c, r, align)
            rows.append(ReportRow(e, method, raw, raw / normalization, n))
            errs.append(raw)
            pairs.append(n)
        if errs:
            mean = float(np.mean(errs))
            weighted = float(np.average(errs, weights=pairs))
            rows.append(ReportRow(MEAN_ROW, method, mean, mean / normalization, int(sum(pairs))))
            rows.append(ReportRow(WEIGHTED_ROW, method, weighted, weighted / normalization,
                                  int(sum(pairs))))
    return ErrorReport(rows, normalization)


def polling_normalization(run_a: dict, run_b: dict, events=None) -> float:
    """Average DTW relative error between two polling runs of the same workload."""
    events = sorted(set(run_a) & set(run_b)) if events is None else events
    errs = [measurement_error(run_a[e], run_b[e], "dtw")[0] for e in events]
    if not errs:
        raise InputError("no shared events between the polling runs")
    value = float(np.mean(errs))
    return value if value > 0 else 1.0


def standard_corrections(batch: SampleBatch, posteriors, n_slices: int,
                         window: int = 5, z_threshold: float = 3.0) -> dict:
    return {"linux": linux_series(batch, n_slices),
            "outlier_drop": outlier_series(batch, n_slices, window, z_threshold),
            "bayesperf": posterior_series(posteriors, n_slices)}
