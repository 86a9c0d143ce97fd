from __future__ import annotations

import math

import numpy as np
import pytest

from sharedserve.costmodel import default_cost_model, linear_cost_model
from sharedserve.errors import ConfigError, TraceParseError, TraceValidationError
from sharedserve.workload import (
    CHAT,
    CODE,
    LengthDist,
    ServiceProfile,
    Trace,
    TraceRecord,
    estimate_exec_stats,
    generate_diurnal_trace,
    generate_trace,
    load_trace,
    perturb_output_lengths,
    profiles_from_dict,
    profiles_to_dict,
    reference_tp,
    resolve_profiles,
    save_trace,
)


def _profiles():
    return [ServiceProfile("a", "llama2-7b", *CHAT), ServiceProfile("b", "llama2-7b", *CODE)]


def test_length_dist_validation_and_support():
    with pytest.raises(ConfigError):
        LengthDist(0.5)
    with pytest.raises(ConfigError):
        LengthDist(10, -1)
    with pytest.raises(ConfigError):
        LengthDist(1, samples=())
    vals, probs = LengthDist.from_samples([3, 3, 5, 9]).support()
    assert list(vals) == [3, 5, 9] and list(probs) == [0.5, 0.25, 0.25]
    assert LengthDist.point(7).degenerate
    assert list(LengthDist.point(7).sample(np.random.default_rng(0), 3)) == [7, 7, 7]


def test_gaussian_lengths_truncate_at_one_token():
    draws = LengthDist(2, 50).sample(np.random.default_rng(1), 1000)
    assert draws.min() >= 1


def test_poisson_trace_rate_and_skewness():
    tr = generate_trace(_profiles(), rate=4.0, duration=500, skewness=3, seed=7)
    assert len(tr) == pytest.approx(2000, rel=0.1)
    svc = [r.service_id for r in tr]
    # runs of 3 consecutive requests per service, alternating
    assert svc[:6] == ["a", "a", "a", "b", "b", "b"]
    times = [r.arrival_time for r in tr]
    assert times == sorted(times) and times[-1] <= 500


def test_traces_are_seeded():
    p = _profiles()
    assert generate_trace(p, 2.0, 100, seed=3) == generate_trace(p, 2.0, 100, seed=3)
    assert generate_trace(p, 2.0, 100, seed=3) != generate_trace(p, 2.0, 100, seed=4)
    d1 = generate_diurnal_trace(p, 2.0, 300, seed=3)
    assert d1 == generate_diurnal_trace(p, 2.0, 300, seed=3)


def test_diurnal_trace_follows_popularity_swing():
    p = [ServiceProfile(f"s{k}", "llama2-7b", LengthDist.point(10), LengthDist.point(10))
         for k in range(2)]
    tr = generate_diurnal_trace(p, rate=20.0, duration=600, period=600, amplitude=0.9,
                                burst_amplitude=0.0, seed=0)
    # service 0 peaks in the first half of the period, service 1 in the second
    first = [r.service_id for r in tr if r.arrival_time < 300]
    second = [r.service_id for r in tr if r.arrival_time >= 300]
    assert first.count("s0") > 2 * first.count("s1")
    assert second.count("s1") > 2 * second.count("s0")


def test_generator_errors_are_named():
    with pytest.raises(ConfigError, match="trace.rate"):
        generate_trace(_profiles(), 0, 10)
    with pytest.raises(ConfigError, match="skewness"):
        generate_trace(_profiles(), 1, 10, skewness=0)
    with pytest.raises(ConfigError):
        generate_diurnal_trace(_profiles(), 1, 10, amplitude=1.0)


def test_trace_validation():
    with pytest.raises(TraceValidationError, match="non-decreasing"):
        Trace([TraceRecord(1.0, "a", 1, 1), TraceRecord(0.5, "a", 1, 1)])
    with pytest.raises(TraceValidationError, match="lengths"):
        Trace([TraceRecord(1.0, "a", 0, 1)])
    tr = Trace([TraceRecord(1.0, "x", 1, 1)])
    with pytest.raises(TraceValidationError, match="unknown service"):
        tr.validate({"a": None})


def test_window_and_rates():
    tr = Trace([TraceRecord(t, s, 1, 1) for t, s in [(0.5, "a"), (1.5, "b"), (2.5, "a"), (3.0, "a")]])
    w = tr.window(1.0, 3.0)
    assert [(r.arrival_time, r.service_id) for r in w] == [(0.5, "b"), (1.5, "a")]
    assert [r.arrival_time for r in tr.window(1.0, 3.0, rebase=False)] == [1.5, 2.5]
    assert tr.service_rates(4.0) == {"a": 0.75, "b": 0.25}


def test_csv_round_trip_is_exact(tmp_path):
    tr = generate_trace(_profiles(), 3.0, 50, seed=11)
    path = tmp_path / "t.csv"
    save_trace(tr, path)
    assert load_trace(path) == tr


@pytest.mark.parametrize("body,exc,line", [
    ("a,b,c,d\n", TraceParseError, 1),
    ("arrival_time,service_id,input_len,output_len\n1.0,a,3\n", TraceParseError, 2),
    ("arrival_time,service_id,input_len,output_len\n1.0,a,x,3\n", TraceParseError, 2),
])
def test_csv_parse_errors_carry_line(tmp_path, body, exc, line):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(exc) as info:
        load_trace(path)
    assert info.value.line == line


def test_csv_validation_errors(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("arrival_time,service_id,input_len,output_len\n2.0,a,1,1\n1.0,a,1,1\n")
    with pytest.raises(TraceValidationError, match="line 3"):
        load_trace(path)


def test_noise_perturbation():
    tr = generate_trace(_profiles(), 3.0, 100, seed=2)
    assert perturb_output_lengths(tr, 0.0) == [r.output_len for r in tr]
    noisy = perturb_output_lengths(tr, 4.0, seed=5)
    assert noisy == perturb_output_lengths(tr, 4.0, seed=5)
    assert min(noisy) >= 1 and noisy != [r.output_len for r in tr]


def test_exact_exec_stats_match_hand_enumeration():
    cm = linear_cost_model(a_p=1.0, a_d=1.0)
    prof = ServiceProfile("s", "toy", LengthDist(1, samples=(1,)),
                          LengthDist(1, samples=(1, 3)))
    mean, std = estimate_exec_stats(prof, cm)
    # exec time 1 s or 3 s with equal probability
    assert mean == pytest.approx(2.0) and std == pytest.approx(1.0)


def test_monte_carlo_exec_stats_close_to_analytic():
    cm = linear_cost_model(a_p=0.0, b_p=0.001, a_d=0.01)
    prof = ServiceProfile("s", "toy", LengthDist(500, 100), LengthDist.point(1))
    mean, std = estimate_exec_stats(prof, cm, n_samples=20000, seed=0)
    assert mean == pytest.approx(0.5, rel=0.01)
    assert std == pytest.approx(0.1, rel=0.05)


def test_resolve_profiles_fills_defaults():
    cm = default_cost_model()
    (p,) = resolve_profiles([ServiceProfile("a", "llama2-7b", *CODE)], cm, slo_scale=5,
                            starvation_factor=5)
    assert p.resolved
    assert p.slo == pytest.approx(5 * p.mean_exec_time)
    assert p.starvation_threshold == pytest.approx(25 * p.mean_exec_time)
    assert p.base_budget == pytest.approx(p.mean_exec_time + p.exec_time_stddev)


def test_reference_tp_respects_min_tp():
    cm = default_cost_model()
    big = ServiceProfile("x", "llama2-70b", *CHAT)
    assert reference_tp(big, cm) == cm.model("llama2-70b").min_tp
    (p,) = resolve_profiles([big], cm)
    assert p.gpu_mean_exec_time == pytest.approx(p.mean_exec_time * p.ref_tp)


def test_explicit_profile_values_are_kept():
    cm = default_cost_model()
    (p,) = resolve_profiles([ServiceProfile("a", "llama2-7b", *CODE, mean_exec_time=2.0,
                                            exec_time_stddev=1.0, slo=9.0)], cm)
    assert (p.mean_exec_time, p.exec_time_stddev, p.slo) == (2.0, 1.0, 9.0)
    assert p.base_budget == 3.0


def test_profiles_dict_round_trip():
    rows = [{"service_id": "a", "model_id": "llama2-7b", "input": {"mean": 10, "stddev": 2},
             "output": {"samples": [1, 2, 3]}, "slo": 4.0}]
    profs = profiles_from_dict(rows)
    assert profiles_from_dict(profiles_to_dict(profs)) == profs
    with pytest.raises(ConfigError, match="duplicate"):
        profiles_from_dict(rows + rows)


def test_request_latency_requires_finish():
    (req,) = Trace([TraceRecord(1.0, "a", 3, 2)]).to_requests([5])
    assert req.est_output_len == 5 and req.context_len == 3
    with pytest.raises(ValueError):
        _ = req.latency
    req.finish_time = 3.5
    assert math.isclose(req.latency, 2.5)
