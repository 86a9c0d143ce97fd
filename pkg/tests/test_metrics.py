from __future__ import annotations

import pytest

from sharedserve.costmodel import linear_cost_model
from sharedserve.errors import SchedulerError
from sharedserve.metrics import compute_metrics, interval_metric, request_slo
from sharedserve.workload import LengthDist, Request, ServiceProfile


def _profiles():
    pt = LengthDist.point(1)
    return {"a": ServiceProfile("a", "toy", pt, pt, mean_exec_time=2.0, exec_time_stddev=0.0,
                                slo=4.0, starvation_threshold=100.0),
            "b": ServiceProfile("b", "toy", pt, pt, mean_exec_time=4.0, exec_time_stddev=0.0,
                                slo=10.0, starvation_threshold=100.0)}


def _fixture():
    """Three finished requests with hand-computed metrics.

    r0: a, latency 3 (L_N 1.5), meets SLO 4, TTFT 1, TPOT (3-1)/2 = 1
    r1: a, latency 4 (L_N 2.0), exactly at SLO 4 so a violation, one output token
    r2: b, latency 8 (L_N 2.0), meets SLO 10, TTFT 2, TPOT (10-4)/3 = 2
    """
    rows = [(0, "a", 0.0, 1.0, 3.0, 3), (1, "a", 1.0, 2.0, 5.0, 1), (2, "b", 2.0, 4.0, 10.0, 4)]
    reqs = []
    for rid, sid, arr, first, fin, out in rows:
        r = Request(rid, sid, arr, 1, out, tokens_generated=out)
        r.first_token_time, r.finish_time = first, fin
        reqs.append(r)
    return reqs


def test_hand_fixture():
    m = compute_metrics(_fixture(), _profiles())
    assert m.l_n_sum == pytest.approx(5.5, abs=1e-9)
    assert m.l_n_mean == pytest.approx(5.5 / 3, abs=1e-9)
    # linear interpolation between the 2nd and 3rd order statistics
    assert m.p99_latency == pytest.approx(4.0 + 0.98 * 4.0, abs=1e-9)
    assert m.slo_attainment == pytest.approx(2 / 3, abs=1e-9)
    assert m.avg_ttft == pytest.approx(4 / 3, abs=1e-9)
    assert m.avg_tpot == pytest.approx(1.5, abs=1e-9)
    assert m.makespan == 10.0 and m.throughput == pytest.approx(0.3)
    assert m.per_service["a"].slo_violations == 1
    assert m.per_service["b"].l_n_mean == pytest.approx(2.0)
    # service a attains 1/2 < 0.9
    assert not m.slo_constraint_met


def test_unservable_requests_count_as_violations():
    reqs = _fixture()
    reqs.append(Request(3, "b", 3.0, 1, 1, unservable=True))
    m = compute_metrics(reqs, _profiles())
    assert m.unservable == 1 and m.finished == 3
    assert m.slo_attainment == pytest.approx(0.5)
    assert m.l_n_mean == pytest.approx(5.5 / 3)


def test_unfinished_request_is_an_error():
    with pytest.raises(SchedulerError):
        compute_metrics([Request(0, "a", 0.0, 1, 1)], _profiles())


def test_per_request_slo_from_cost_model():
    cm = linear_cost_model(a_p=1.0, a_d=0.5)
    prof = _profiles()["a"]
    # isolated time: one prefill plus three decodes
    assert request_slo(Request(0, "a", 0.0, 1, 4), prof, cm) == pytest.approx(5 * 2.5)
    assert request_slo(Request(0, "a", 0.0, 1, 4), prof, None) == 4.0


def test_empty_input_and_interval_metric():
    m = compute_metrics([], _profiles())
    assert m.requests == 0 and m.slo_attainment == 1.0
    assert interval_metric(_fixture(), _profiles()) == pytest.approx(5.5 / 3)
    assert interval_metric(_fixture(), _profiles(), "slo_attainment") == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        interval_metric(_fixture(), _profiles(), "p50")


def test_report_serializes():
    d = compute_metrics(_fixture(), _profiles()).to_dict()
    assert list(d["per_service"]) == ["a", "b"] and d["delta"] == 0.9
