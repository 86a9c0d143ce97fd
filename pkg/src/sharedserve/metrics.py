"""Latency, SLO, and throughput metrics over simulated requests."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .costmodel import CostModel
from .errors import SchedulerError
from .workload import Request, ServiceProfile

DEFAULT_SLO_SCALE = 5.0
DEFAULT_DELTA = 0.9


@dataclass
class ServiceMetrics:
    requests: int = 0
    finished: int = 0
    unservable: int = 0
    l_n_sum: float = 0.0
    l_n_mean: float = 0.0
    slo_attainment: float = 1.0
    slo_violations: int = 0
    p99_latency: float = 0.0
    mean_latency: float = 0.0
    avg_ttft: float = 0.0
    avg_tpot: float = 0.0
    throughput: float = 0.0


@dataclass
class MetricsReport(ServiceMetrics):
    delta: float = DEFAULT_DELTA
    slo_constraint_met: bool = True
    makespan: float = 0.0
    per_service: dict[str, ServiceMetrics] = field(default_factory=dict)
    kv_cache: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_service"] = {s: asdict(m) for s, m in sorted(self.per_service.items())}
        return d


def request_slo(req: Request, profile: ServiceProfile, cm: CostModel | None,
                slo_scale: float = DEFAULT_SLO_SCALE) -> float:
    """Deadline for one request: ``slo_scale`` times its own isolated execution time."""
    if cm is None:
        return profile.slo
    iso = cm.isolated_exec_time(profile.model_id, profile.ref_tp, req.input_len, req.output_len)
    return slo_scale * iso


def _p99(values: Sequence[float]) -> float:
    return float(np.percentile(values, 99)) if len(values) else 0.0


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def _summarize(reqs: Sequence[Request], profiles: Mapping[str, ServiceProfile],
               cm: CostModel | None, slo_scale: float, span: float) -> ServiceMetrics:
    m = ServiceMetrics(requests=len(reqs))
    latencies, norm, ttft, tpot = [], [], [], []
    met = 0
    for r in reqs:
        if r.unservable:
            m.unservable += 1
            continue
        if r.finish_time is None:
            raise SchedulerError(f"request {r.id} is neither finished nor unservable")
        prof = profiles[r.service_id]
        lat = r.finish_time - r.arrival_time
        latencies.append(lat)
        norm.append(lat / prof.mean_exec_time)
        ttft.append(r.first_token_time - r.arrival_time)
        if r.output_len >= 2:
            tpot.append((r.finish_time - r.first_token_time) / (r.output_len - 1))
        if lat < request_slo(r, prof, cm, slo_scale):
            met += 1
    m.finished = len(latencies)
    m.l_n_sum = float(sum(norm))
    m.l_n_mean = m.l_n_sum / len(norm) if norm else 0.0
    m.slo_violations = m.requests - met
    m.slo_attainment = met / m.requests if m.requests else 1.0
    m.p99_latency = _p99(latencies)
    m.mean_latency = _mean(latencies)
    m.avg_ttft = _mean(ttft)
    m.avg_tpot = _mean(tpot)
    m.throughput = m.finished / span if span > 0 else 0.0
    return m


def compute_metrics(
    requests: Iterable[Request],
    profiles: Mapping[str, ServiceProfile],
    cost_model: CostModel | None = None,
    slo_scale: float = DEFAULT_SLO_SCALE,
    delta: float = DEFAULT_DELTA,
    kv_stats: list[dict] | None = None,
) -> MetricsReport:
    """Aggregate and per-service metrics.

    ``l_n_sum`` adds latency / mean execution time over requests and
    ``l_n_mean`` divides it by the number of finished requests.  With a cost
    model the SLO of each request is ``slo_scale`` times its own isolated
    execution time, otherwise the profile's SLO.  Meeting the deadline exactly
    counts as a violation, as do unservable requests.
    """
    reqs = list(requests)
    if reqs:
        start = min(r.arrival_time for r in reqs)
        ends = [r.finish_time for r in reqs if r.finish_time is not None]
        span = (max(ends) - start) if ends else 0.0
    else:
        span = 0.0
    agg = _summarize(reqs, profiles, cost_model, slo_scale, span)
    report = MetricsReport(**asdict(agg), delta=delta, makespan=span, kv_cache=list(kv_stats or []))
    by_service: dict[str, list[Request]] = {}
    for r in reqs:
        by_service.setdefault(r.service_id, []).append(r)
    for s in profiles:
        report.per_service[s] = _summarize(by_service.get(s, []), profiles, cost_model,
                                           slo_scale, span)
    report.slo_constraint_met = all(m.slo_attainment >= delta for m in report.per_service.values())
    return report


def interval_metric(requests: Sequence[Request], profiles: Mapping[str, ServiceProfile],
                    kind: str = "l_n_mean", cost_model: CostModel | None = None,
                    slo_scale: float = DEFAULT_SLO_SCALE) -> float:
    """Scalar used to compare real and estimated performance over one interval."""
    m = _summarize(requests, profiles, cost_model, slo_scale, 0.0)
    if kind == "l_n_mean":
        return m.l_n_mean
    if kind == "slo_attainment":
        return m.slo_attainment
    raise ValueError(f"unknown metric kind {kind!r}")
