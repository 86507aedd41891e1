"""Command-line driver: ``bayesperf {schedule,simulate,infer,eval,experiment}``.

Exit codes: 0 success, 2 input error, 3 numerical/runtime error.  The only
environment variable read is ``BAYESPERF_LOG`` (a logging level name).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import BayesPerfError, InputError, NumericalError
from .evaluation import METHODS, build_report, standard_corrections
from .events import load_catalog, load_schedule, save_json
from .inference import (EpConfig, read_posteriors, run_inference,
                        write_posteriors, write_posteriors_json)
from .measurement import read_trace, write_trace
from .relations import FactorGraph, build_factor_graph, load_relations
from .scheduler import describe_transform, summarize_transform, transform_schedule
from .simulator import load_scenario, read_truth, write_truth

log = logging.getLogger("bayesperf")


def _ep_config(args) -> EpConfig:
    defaults = EpConfig()
    mcmc = replace(defaults.mcmc, seed=args.seed if args.seed is not None else 0,
                   n_samples=args.mcmc_samples or defaults.mcmc.n_samples)
    return EpConfig(
        k_window=args.k_window or defaults.k_window,
        damping=args.damping if args.damping is not None else defaults.damping,
        convergence_tol=args.tol if args.tol is not None else defaults.convergence_tol,
        mcmc=mcmc,
        threads=args.threads,
        refine_theta=args.refine_slack,
        smoothing_lag=args.smoothing_lag,
    )


def _graph(args, relations, extra_events=()) -> FactorGraph:
    if args.catalog:
        return build_factor_graph(load_catalog(args.catalog), relations)
    names = set(extra_events)
    for f in relations:
        names |= f.scope
    return build_factor_graph(sorted(names), relations)


# Subcommands -----------------------------------------------------------------


def cmd_schedule(args) -> int:
    catalog = load_catalog(args.catalog)
    relations = load_relations(args.relations)
    graph = build_factor_graph(catalog, relations)
    requested = load_schedule(args.schedule)
    out = transform_schedule(graph, catalog, requested, cyclic=args.cyclic)
    summary = summarize_transform(requested, out)
    save_json(out.to_json(), args.out)
    listing = describe_transform(out)
    Path(str(args.out) + ".txt").write_text(listing + "\n")
    print(listing)
    print(f"requested {summary.requested} slices, inserted {summary.inserted}, "
          f"breaks {summary.breaks}")
    return 0


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    truth, batch = scenario.run(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(batch, out / "trace.csv")
    write_truth(truth, out / "truth.csv")
    if scenario.policy.schedule is not None:
        save_json(scenario.policy.schedule.to_json(), out / "schedule.json")
    print(f"{truth.n_slices} slices, {len(batch)} samples -> {out}")
    return 0


def cmd_infer(args) -> int:
    batch = read_trace(args.trace)
    relations = load_relations(args.relations)
    graph = _graph(args, relations, batch.event_names())
    schedule = load_schedule(args.schedule) if args.schedule else None
    if schedule is not None:
        batch.validate(schedule)
    config = _ep_config(args)
    posteriors = run_inference(graph, schedule, batch, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_posteriors(posteriors, out)
    write_posteriors_json(posteriors, out.with_suffix(".json"))
    flagged = sum(1 for p in posteriors if p.warnings)
    print(f"{len(posteriors)} posteriors -> {out} ({flagged} with warnings)")
    return 0


def _write_series(path, corrections, n_slices):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice", "event", "method", "value"])
        for method, series in corrections.items():
            for e in sorted(series):
                if series[e] is None:
                    continue
                for t in range(n_slices):
                    w.writerow([t, e, method, repr(float(series[e][t]))])


def _evaluate(truth, batch, posteriors, out_dir, events=None):
    n = truth.n_slices
    corrections = standard_corrections(batch, posteriors, n)
    if events is None:
        observed = set(batch.event_names())
        events = [e for e in truth.events if e in observed]
    report = build_report(truth, corrections, events)
    report.write(out_dir)
    _write_series(Path(out_dir) / "series.csv", corrections, n)
    for m in METHODS:
        print(f"{m:>13s}  mean relative error {report.error(m):.4f}")
    return report


def cmd_eval(args) -> int:
    truth = read_truth(args.truth)
    batch = read_trace(args.trace)
    posteriors = []
    for path in args.posteriors:
        posteriors.extend(read_posteriors(path))
    events = args.events.split(",") if args.events else None
    _evaluate(truth, batch, posteriors, args.out, events)
    return 0


def cmd_experiment(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    truth, batch = scenario.run(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(batch, out / "trace.csv")
    write_truth(truth, out / "truth.csv")
    posteriors = run_inference(scenario.graph, scenario.policy.schedule, batch,
                               _ep_config(args), n_slices=truth.n_slices)
    write_posteriors(posteriors, out / "posteriors.csv")
    events = list(scenario.events or scenario.catalog.programmable_events())
    report = _evaluate(truth, batch, posteriors, out, events)
    ratio = report.error("bayesperf") / report.error("linux")
    print(f"bayesperf / linux = {ratio:.3f}")
    return 0


# Parser ----------------------------------------------------------------------


def _add_ep_flags(p):
    p.add_argument("--seed", type=int, default=0, help="MCMC seed (default 0)")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for site updates; results do not depend on it")
    p.add_argument("--k-window", type=int, default=None,
                   help="slices jointly inferred per window (default 24)")
    p.add_argument("--damping", type=float, default=None,
                   help="EP damping in (0, 1] (default 0.8)")
    p.add_argument("--mcmc-samples", type=int, default=None,
                   help="MCMC draws per tilted distribution (default 4096)")
    p.add_argument("--tol", type=float, default=None,
                   help="convergence tolerance in posterior-width units (default 0.1)")
    p.add_argument("--smoothing-lag", type=int, default=None,
                   help="slices of look-ahead per estimate (default k-window/2; 0 = online)")
    p.add_argument("--refine-slack", action="store_true",
                   help="pick relation slack multipliers by maximum likelihood first")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bayesperf",
        description="Schedule, simulate, correct and evaluate multiplexed counter samples.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="insert bridge slices into a requested schedule")
    p.add_argument("--catalog", required=True, help="event catalog JSON")
    p.add_argument("--relations", required=True, help="relation factors JSON")
    p.add_argument("--schedule", required=True, help="requested schedule JSON")
    p.add_argument("--out", required=True, help="transformed schedule JSON (listing in OUT.txt)")
    p.add_argument("--cyclic", action="store_true", help="also bridge last slice -> first")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="generate trace.csv and truth.csv from a scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("infer", help="posterior event values from a trace")
    p.add_argument("--trace", required=True, help="trace CSV")
    p.add_argument("--relations", required=True, help="relation factors JSON")
    p.add_argument("--schedule", default=None, help="schedule JSON the trace was taken with")
    p.add_argument("--catalog", default=None, help="event catalog JSON (default: events seen)")
    p.add_argument("--out", required=True, help="posterior CSV (JSON written alongside)")
    _add_ep_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="error report against ground truth")
    p.add_argument("--truth", required=True, help="truth CSV")
    p.add_argument("--trace", required=True, help="trace CSV (linux and outlier-drop series)")
    p.add_argument("--posteriors", nargs="+", default=[], help="posterior CSV file(s)")
    p.add_argument("--events", default=None, help="comma-separated events to score")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="simulate, infer and evaluate in one go")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--out", required=True, help="output directory")
    _add_ep_flags(p)
    p.set_defaults(func=cmd_experiment, seed=None)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("BAYESPERF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, BayesPerfError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
