import json
import subprocess
import sys

import pytest

from bayesperf import cli
from bayesperf.errors import ImproperGlobal
from bayesperf.events import Configuration
from bayesperf.inference import read_posteriors
from bayesperf.measurement import linux_scale, read_trace
from bayesperf.simulator import read_truth

from oracles import min_insertions

FLAGS = ["--catalog", "--relations", "--schedule", "--scenario", "--trace", "--truth", "--out",
         "--seed", "--threads", "--k-window", "--damping", "--mcmc-samples", "--tol"]


def catalog_json(names, n_p):
    return {"n_fixed": 0, "n_programmable": n_p, "constraints": [],
            "events": [{"name": n, "kind": "programmable"} for n in names]}


def schedule_json(groups):
    return {"slice_duration": 1.0,
            "slices": [{"assignments": Configuration(dict(enumerate(g))).to_json()}
                       for g in groups]}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def scenario(tmp_path):
    """Three events, e3 = e1 + e2, two counters, no noise, 4 interrupts a slice."""
    obj = {
        "catalog": catalog_json(["e1", "e2", "e3"], 2),
        "relations": {"factors": [{"id": "s", "lhs": "e3", "rhs": "(add e1 e2)"}]},
        "n_slices": 12, "seed": 3,
        "workload": {"phases": [{"duration": 6, "base_rates": {"e1": 20.0, "e2": 30.0}},
                                {"duration": 6, "base_rates": {"e1": 70.0, "e2": 10.0}}]},
        "noise": {"relative_sigma": 0.0},
        "policy": {"mode": "multiplexed", "threshold": 0.25, "schedule": schedule_json(
            [["e1", "e3"], ["e2", "e3"]])},
    }
    write(tmp_path / "catalog.json", obj["catalog"])
    write(tmp_path / "relations.json", obj["relations"])
    return write(tmp_path / "scenario.json", obj)


def test_help_documents_every_flag():
    parser = cli.build_parser()
    text = parser.format_help()
    for name, sub in parser._subparsers._group_actions[0].choices.items():
        text += sub.format_help()
    for flag in FLAGS:
        assert flag in text, flag


def test_schedule_valid(tmp_path, capsys):
    cat = write(tmp_path / "c.json", catalog_json(["a", "b", "c", "d"], 2))
    rel = write(tmp_path / "r.json", {"factors": [{"id": "f", "lhs": "a", "rhs": "(add b c)"}]})
    req = write(tmp_path / "s.json", schedule_json([["a", "d"], ["b", "c"]]))
    out = tmp_path / "out.json"
    code = cli.main(["schedule", "--catalog", cat, "--relations", rel, "--schedule", req,
                     "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert len(doc["slices"]) >= 2
    assert (tmp_path / "out.json.txt").exists()
    assert "requested 2 slices" in capsys.readouterr().out


def test_schedule_invalid_slice(tmp_path, capsys):
    cat = write(tmp_path / "c.json", catalog_json(["a", "b", "c"], 2))
    rel = write(tmp_path / "r.json", {"factors": []})
    req = write(tmp_path / "s.json", schedule_json([["a", "b", "c"]]))
    code = cli.main(["schedule", "--catalog", cat, "--relations", rel, "--schedule", req,
                     "--out", str(tmp_path / "o.json")])
    assert code == 2
    assert "CapacityLimit" in capsys.readouterr().err


def test_schedule_disconnected_events_break(tmp_path, capsys):
    names = ["a", "b", "c", "d"]
    scopes = [{"a", "b"}]
    # with one counter nothing but a shared event links two slices, so the
    # oracle finds no chain from {c} to {d}
    assert min_insertions(scopes, [frozenset({n}) for n in names], {"c"}, {"d"}) is None
    cat = write(tmp_path / "c.json", catalog_json(names, 1))
    rel = write(tmp_path / "r.json", {"factors": [{"id": "f", "lhs": "a", "rhs": "b"}]})
    req = write(tmp_path / "s.json", schedule_json([["c"], ["d"]]))
    code = cli.main(["schedule", "--catalog", cat, "--relations", rel, "--schedule", req,
                     "--out", str(tmp_path / "o.json")])
    assert code == 0
    assert "breaks 1" in capsys.readouterr().out
    doc = json.loads((tmp_path / "o.json").read_text())
    assert [s["break_before"] for s in doc["slices"]] == [False, True]


def test_simulate_deterministic(tmp_path, scenario):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--scenario", scenario, "--out", str(tmp_path / name)]) == 0
    for f in ("trace.csv", "truth.csv", "schedule.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    cli.main(["simulate", "--scenario", scenario, "--out", str(tmp_path / "c"), "--seed", "9"])
    assert (tmp_path / "c" / "trace.csv").exists()


def test_simulate_zero_noise_round_trip(tmp_path, scenario):
    assert cli.main(["simulate", "--scenario", scenario, "--out", str(tmp_path / "sim")]) == 0
    truth = read_truth(tmp_path / "sim" / "truth.csv")
    batch = read_trace(tmp_path / "sim" / "trace.csv")
    assert len(batch) > 0
    for s in batch:
        assert linux_scale(s) == truth.values[s.event][s.slice_index]


def test_malformed_json_reports_location(tmp_path, capsys):
    bad = tmp_path / "scenario.json"
    bad.write_text('{"catalog": {\n  "n_fixed": 0,,\n}')
    code = cli.main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "line 2 column" in err


def test_missing_file_exit_2(tmp_path):
    assert cli.main(["simulate", "--scenario", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2


def test_infer_and_eval(tmp_path, scenario, capsys):
    sim = tmp_path / "sim"
    cli.main(["simulate", "--scenario", scenario, "--out", str(sim)])
    args = ["infer", "--trace", str(sim / "trace.csv"), "--relations",
            str(tmp_path / "relations.json"), "--schedule", str(sim / "schedule.json"),
            "--catalog", str(tmp_path / "catalog.json"), "--mcmc-samples", "512",
            "--seed", "1"]
    assert cli.main(args + ["--out", str(tmp_path / "p1.csv")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "p2.csv"), "--threads", "2"]) == 0
    assert (tmp_path / "p1.csv").read_bytes() == (tmp_path / "p2.csv").read_bytes()
    assert (tmp_path / "p1.json").exists()
    posts = read_posteriors(tmp_path / "p1.csv")
    assert {p.slice_index for p in posts} == set(range(12))

    code = cli.main(["eval", "--truth", str(sim / "truth.csv"), "--trace", str(sim / "trace.csv"),
                     "--posteriors", str(tmp_path / "p1.csv"), "--out", str(tmp_path / "rep")])
    assert code == 0
    report = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert report[0] == "event,method,error,normalized_error,n_pairs"
    series = (tmp_path / "rep" / "series.csv").read_text().splitlines()
    assert series[0] == "slice,event,method,value"
    assert "bayesperf" in capsys.readouterr().out


def test_eval_schema_mismatch(tmp_path):
    (tmp_path / "truth.csv").write_text("slice,event,value\n0,a,1.0\n")
    (tmp_path / "trace.csv").write_text("slice,event,value\n")
    code = cli.main(["eval", "--truth", str(tmp_path / "truth.csv"),
                     "--trace", str(tmp_path / "trace.csv"), "--out", str(tmp_path / "o")])
    assert code == 2


def test_numerical_error_exit_3(tmp_path, scenario, monkeypatch):
    sim = tmp_path / "sim"
    cli.main(["simulate", "--scenario", scenario, "--out", str(sim)])

    def boom(*a, **k):
        raise ImproperGlobal("negative global precision")

    monkeypatch.setattr(cli, "run_inference", boom)
    code = cli.main(["infer", "--trace", str(sim / "trace.csv"), "--relations",
                     str(tmp_path / "relations.json"), "--out", str(tmp_path / "p.csv")])
    assert code == 3


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bayesperf", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "experiment" in res.stdout
