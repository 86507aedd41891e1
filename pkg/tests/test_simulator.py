import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bayesperf.errors import InputError, InvalidSchedule, RelationInconsistent
from bayesperf.events import Configuration, Schedule
from bayesperf.measurement import linux_scale, trace_to_string
from bayesperf.relations import RelationFactor
from bayesperf.simulator import (NoiseModel, Phase, SamplingPolicy, WorkloadModel,
                                 generate_ground_truth, load_scenario, read_truth, sample_trace,
                                 write_truth)

from conftest import A1_SCENARIO, make_catalog

SUM = [RelationFactor("s", "e3", "(add e1 e2)")]


def two_phase(rates_a=(2.0, 3.0), rates_b=(7.0, 1.0), durations=(4, 6)):
    return WorkloadModel([Phase(durations[0], {"e1": rates_a[0], "e2": rates_a[1]}),
                          Phase(durations[1], {"e1": rates_b[0], "e2": rates_b[1]})], SUM)


def rotation(catalog, groups):
    return Schedule([Configuration(dict(enumerate(g))) for g in groups])


def test_relation_closure():
    w = WorkloadModel([Phase(10, {"e1": 2.0, "e2": 3.0})], SUM)
    truth = generate_ground_truth(w, 10)
    assert np.all(truth.values["e3"] == 5.0)
    assert truth.events == ["e1", "e2", "e3"]


def test_phase_boundary():
    truth = generate_ground_truth(two_phase(), 10)
    e3 = truth.values["e3"]
    assert list(e3[:4]) == [5.0] * 4
    assert list(e3[4:]) == [8.0] * 6


def test_zero_horizon_is_empty():
    truth = generate_ground_truth(two_phase(), 0)
    assert truth.n_slices == 0 and truth.values == {}


def test_horizon_beyond_phases():
    with pytest.raises(InputError):
        generate_ground_truth(two_phase(), 11)


def test_inconsistent_free_events():
    w = WorkloadModel([Phase(3, {"a": 1.0, "b": 2.0})], [RelationFactor("f", "a", "b")])
    with pytest.raises(RelationInconsistent):
        generate_ground_truth(w, 3)


@given(st.lists(st.tuples(st.floats(0, 1e6), st.floats(0, 1e6)), min_size=1, max_size=4),
       st.floats(0, 0.05))
def test_truth_residuals_are_zero(rates, drift):
    phases = [Phase(3, {"e1": a, "e2": b}) for a, b in rates]
    rels = SUM + [RelationFactor("r", "e4", "(mul e3 2)")]
    w = WorkloadModel(phases, rels, seed=3, drift=drift)
    truth = generate_ground_truth(w, 3 * len(rates))
    for f in rels:
        assert np.all(f.residual(truth.values) == 0)


def test_zero_noise_round_trip():
    cat = make_catalog(["e1", "e2", "e3"], n_p=2)
    truth = generate_ground_truth(two_phase(), 10)
    # power-of-two shares: the scaled value comes back bit for bit
    policy = SamplingPolicy(threshold=0.25, schedule=rotation(cat, [["e1", "e2"], ["e3"]]))
    batch = sample_trace(truth, policy, NoiseModel(), cat, seed=4)
    assert len(batch) == 5 * 8 + 5 * 4
    for s in batch:
        assert linux_scale(s) == truth.values[s.event][s.slice_index]
        assert s.t_enabled == 0.25 and s.t_running == 1.0


def test_zero_noise_round_trip_odd_share():
    cat = make_catalog(["e1", "e2", "e3"], n_p=1)
    w = WorkloadModel([Phase(50, {"e1": 1234.567, "e2": 89.1011})], SUM, seed=1, drift=0.3)
    truth = generate_ground_truth(w, 50)
    policy = SamplingPolicy(threshold=1 / 7, schedule=rotation(cat, [["e1"], ["e2"], ["e3"]]))
    batch = sample_trace(truth, policy, NoiseModel(), cat)
    for s in batch:
        true = truth.values[s.event][s.slice_index]
        assert abs(linux_scale(s) - true) <= math.ulp(true)


def test_polling_zero_noise_is_exact():
    cat = make_catalog(["e1", "e2", "e3"], n_p=2)
    w = WorkloadModel([Phase(30, {"e1": 1e9 / 3, "e2": math.pi})], SUM, drift=0.2)
    truth = generate_ground_truth(w, 30)
    policy = SamplingPolicy("polling", threshold=0.5, polled_events=("e1", "e3"))
    batch = sample_trace(truth, policy, NoiseModel(), cat)
    assert batch.event_names() == ["e1", "e3"]
    for s in batch:
        assert s.t_enabled == s.t_running
        assert s.value == truth.values[s.event][s.slice_index]


def test_polling_too_many_events():
    cat = make_catalog(["e1", "e2", "e3"], n_p=2)
    truth = generate_ground_truth(two_phase(), 5)
    with pytest.raises(InvalidSchedule):
        sample_trace(truth, SamplingPolicy("polling", polled_events=("e1", "e2", "e3")),
                     NoiseModel(), cat)


def test_multiplexed_needs_schedule():
    cat = make_catalog(["e1", "e2", "e3"], n_p=2)
    truth = generate_ground_truth(two_phase(), 5)
    with pytest.raises(InvalidSchedule):
        sample_trace(truth, SamplingPolicy(), NoiseModel(), cat)


def test_dropout_mechanics():
    cat = make_catalog(["e1", "e2", "e3"], n_p=3)
    truth = generate_ground_truth(two_phase(), 10)
    policy = SamplingPolicy(schedule=rotation(cat, [["e1", "e2", "e3"]]))
    batch = sample_trace(truth, policy, NoiseModel(dropout_prob=0.999), cat, seed=0)
    assert len(batch) < 30
    for t in batch.slices:
        for e in batch.events_in(t):
            assert batch.samples(t, e)
    # the batch still validates against the schedule it came from
    batch.validate(policy.schedule, cat)


def test_relative_noise_level():
    cat = make_catalog(["e1", "e2", "e3"], n_p=3)
    w = WorkloadModel([Phase(100, {"e1": 5e6, "e2": 2e6})], SUM)
    truth = generate_ground_truth(w, 100)
    policy = SamplingPolicy(threshold=0.02, schedule=rotation(cat, [["e1", "e2", "e3"]]))
    batch = sample_trace(truth, policy, NoiseModel(relative_sigma=0.2), cat, seed=11)
    rel = np.array([linux_scale(s) / truth.values[s.event][s.slice_index] - 1 for s in batch])
    assert rel.size >= 10_000
    assert abs(rel.mean()) < 0.01
    assert rel.std() == pytest.approx(0.2, abs=0.02 * 0.2)


def test_bias_shifts_scaled_values():
    cat = make_catalog(["e1", "e2", "e3"], n_p=3)
    truth = generate_ground_truth(two_phase(), 10)
    policy = SamplingPolicy(schedule=rotation(cat, [["e1", "e2", "e3"]]))
    batch = sample_trace(truth, policy, NoiseModel(bias=0.1), cat)
    for s in batch:
        assert linux_scale(s) == pytest.approx(1.1 * truth.values[s.event][s.slice_index])


def test_interrupts_follow_trigger():
    cat = make_catalog(["e1", "e2", "e3"], n_p=1)
    truth = generate_ground_truth(two_phase(), 10)
    policy = SamplingPolicy(threshold=1.0, trigger_event="e3",
                            schedule=rotation(cat, [["e1"]]))
    batch = sample_trace(truth, policy, NoiseModel(), cat)
    assert len(batch.samples(0, "e1")) == 5
    assert len(batch.samples(9, "e1")) == 8


def test_seed_determinism(tmp_path):
    s = load_scenario(A1_SCENARIO)
    _, a = s.run(5)
    _, b = s.run(5)
    _, c = s.run(6)
    assert trace_to_string(a) == trace_to_string(b)
    assert trace_to_string(a) != trace_to_string(c)


def test_truth_csv_round_trip(tmp_path):
    w = WorkloadModel([Phase(12, {"e1": 1 / 3, "e2": 2e9 / 7})], SUM, seed=2, drift=0.1)
    truth = generate_ground_truth(w, 12)
    write_truth(truth, tmp_path / "t.csv")
    back = read_truth(tmp_path / "t.csv")
    assert back == truth
    write_truth(back, tmp_path / "u.csv")
    assert (tmp_path / "t.csv").read_bytes() == (tmp_path / "u.csv").read_bytes()


def test_noise_model_invariants():
    with pytest.raises(InputError):
        NoiseModel(relative_sigma=-0.1)
    with pytest.raises(InputError):
        NoiseModel(dropout_prob=1.0)
    with pytest.raises(InputError):
        SamplingPolicy(threshold=0)
