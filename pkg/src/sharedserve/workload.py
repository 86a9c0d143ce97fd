"""Requests, service profiles, and arrival traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np
import yaml

from .costmodel import CostModel
from .errors import ConfigError, TraceParseError, TraceValidationError

WAITING = "waiting"
PREFILL = "prefill"
DECODING = "decoding"
FINISHED = "finished"

TRACE_HEADER = ("arrival_time", "service_id", "input_len", "output_len")


@dataclass(slots=True, eq=False)
class Request:
    id: int
    service_id: str
    arrival_time: float
    input_len: int
    output_len: int
    tokens_generated: int = 0
    phase: str = WAITING
    first_token_time: float | None = None
    finish_time: float | None = None
    budget_remaining: float = 0.0
    budget_doublings: int = 0
    # scheduler-visible output length (profiled / noisy); ground truth stays in output_len
    est_output_len: int | None = None
    unservable: bool = False
    # scheduler bookkeeping
    priority: float = 0.0
    budget_granted: float = 0.0
    enqueue_time: float = 0.0
    mlfq_level: int = 0
    mlfq_attained: float = 0.0
    admitted: bool = False
    order: int = 0
    # KV cache view: tokens whose KV is resident, and pending prefill size
    kv_tokens: int = 0
    prefill_tokens: int = 0
    evictions: int = 0
    engine_id: int | None = None

    @property
    def finished(self) -> bool:
        return self.phase == FINISHED

    @property
    def context_len(self) -> int:
        return self.input_len + self.tokens_generated

    @property
    def latency(self) -> float:
        if self.finish_time is None:
            raise ValueError(f"request {self.id} has not finished")
        return self.finish_time - self.arrival_time


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution: empirical samples, or a Gaussian truncated at one token."""

    mean: float
    stddev: float = 0.0
    samples: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.samples is not None:
            if not self.samples or min(self.samples) < 1:
                raise ConfigError("length samples must be non-empty and >= 1")
        elif self.mean < 1 or self.stddev < 0:
            raise ConfigError("length mean must be >= 1 and stddev >= 0")

    @classmethod
    def from_samples(cls, samples: Iterable[int]) -> "LengthDist":
        arr = np.asarray(list(samples), dtype=np.int64)
        return cls(float(arr.mean()), float(arr.std()), tuple(int(x) for x in arr))

    @classmethod
    def point(cls, value: int) -> "LengthDist":
        return cls(float(value), 0.0)

    @property
    def degenerate(self) -> bool:
        if self.samples is not None:
            return len(set(self.samples)) == 1
        return self.stddev == 0

    def support(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Exact ``(values, probabilities)`` when the distribution is finite."""
        if self.samples is not None:
            vals, counts = np.unique(np.asarray(self.samples), return_counts=True)
            return vals, counts / counts.sum()
        if self.stddev == 0:
            return np.array([max(1, round(self.mean))]), np.array([1.0])
        return None

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.samples is not None:
            return rng.choice(np.asarray(self.samples, dtype=np.int64), size=size)
        if self.stddev == 0:
            return np.full(size, max(1, round(self.mean)), dtype=np.int64)
        draws = rng.normal(self.mean, self.stddev, size=size)
        return np.maximum(1, np.rint(draws)).astype(np.int64)


@dataclass(frozen=True)
class ServiceProfile:
    """Per-service characteristics.

    ``mean_exec_time`` and ``exec_time_stddev`` are wall seconds of isolated
    execution at ``ref_tp`` (the model's minimum TP size, 1 for models that fit
    on one GPU).  Budgets are kept in GPU-seconds, i.e. these values times
    ``ref_tp``.  ``None`` fields are filled in by :func:`resolve_profiles`.
    """

    service_id: str
    model_id: str
    input_len_dist: LengthDist
    output_len_dist: LengthDist
    mean_exec_time: float | None = None
    exec_time_stddev: float | None = None
    slo: float | None = None
    starvation_threshold: float | None = None
    ref_tp: int = 1

    def __post_init__(self):
        if self.mean_exec_time is not None and self.mean_exec_time <= 0:
            raise ConfigError("mean_exec_time must be > 0", key=f"services.{self.service_id}")
        if self.exec_time_stddev is not None and self.exec_time_stddev < 0:
            raise ConfigError("exec_time_stddev must be >= 0", key=f"services.{self.service_id}")
        if self.slo is not None and self.slo <= 0:
            raise ConfigError("slo must be > 0", key=f"services.{self.service_id}")

    @property
    def resolved(self) -> bool:
        return None not in (self.mean_exec_time, self.exec_time_stddev, self.slo,
                            self.starvation_threshold)

    @property
    def base_budget(self) -> float:
        """Initial budget in GPU-seconds: (mean + stddev) of execution time."""
        return (self.mean_exec_time + self.exec_time_stddev) * self.ref_tp

    @property
    def gpu_mean_exec_time(self) -> float:
        return self.mean_exec_time * self.ref_tp


class TraceRecord(NamedTuple):
    arrival_time: float
    service_id: str
    input_len: int
    output_len: int


@dataclass
class Trace:
    records: list[TraceRecord] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __eq__(self, other) -> bool:
        return isinstance(other, Trace) and self.records == other.records

    @property
    def duration(self) -> float:
        return self.records[-1].arrival_time if self.records else 0.0

    def validate(self, profiles: Mapping[str, ServiceProfile] | None = None) -> None:
        prev = -math.inf
        for i, rec in enumerate(self.records):
            if rec.arrival_time < prev:
                raise TraceValidationError(f"record {i}: arrival times must be non-decreasing")
            if rec.arrival_time < 0 or not math.isfinite(rec.arrival_time):
                raise TraceValidationError(f"record {i}: arrival_time must be finite and >= 0")
            if rec.input_len < 1 or rec.output_len < 1:
                raise TraceValidationError(f"record {i}: lengths must be >= 1")
            if profiles is not None and rec.service_id not in profiles:
                raise TraceValidationError(f"record {i}: unknown service {rec.service_id!r}")
            prev = rec.arrival_time

    def window(self, start: float, end: float, rebase: bool = True) -> "Trace":
        """Records with ``start <= arrival < end``; times shifted to start at 0 if ``rebase``."""
        off = start if rebase else 0.0
        return Trace([
            rec._replace(arrival_time=rec.arrival_time - off)
            for rec in self.records if start <= rec.arrival_time < end
        ])

    def service_rates(self, duration: float | None = None) -> dict[str, float]:
        span = duration if duration else max(self.duration, 1e-9)
        rates: dict[str, float] = {}
        for rec in self.records:
            rates[rec.service_id] = rates.get(rec.service_id, 0.0) + 1.0
        return {s: n / span for s, n in rates.items()}

    def to_requests(self, est_output_lens: Sequence[int] | None = None) -> list[Request]:
        reqs = []
        for i, rec in enumerate(self.records):
            est = est_output_lens[i] if est_output_lens is not None else None
            reqs.append(Request(i, rec.service_id, rec.arrival_time, rec.input_len,
                                rec.output_len, est_output_len=est))
        return reqs


def _check_profiles(profiles: Sequence[ServiceProfile]) -> None:
    if not profiles:
        raise ConfigError("at least one service profile is required", key="services")


def generate_trace(
    profiles: Sequence[ServiceProfile],
    rate: float,
    duration: float,
    skewness: int = 1,
    seed: int = 0,
) -> Trace:
    """Poisson arrivals at ``rate``; services assigned round-robin in runs of ``skewness``."""
    _check_profiles(profiles)
    if rate <= 0:
        raise ConfigError("rate must be > 0", key="trace.rate")
    if skewness < 1:
        raise ConfigError("skewness must be >= 1", key="trace.skewness")
    rng = np.random.default_rng(seed)
    times = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t > duration:
            break
        times.append(t)
    n = len(times)
    which = (np.arange(n) // skewness) % len(profiles)
    inputs = np.zeros(n, dtype=np.int64)
    outputs = np.zeros(n, dtype=np.int64)
    for k, prof in enumerate(profiles):
        idx = np.flatnonzero(which == k)
        inputs[idx] = prof.input_len_dist.sample(rng, len(idx))
        outputs[idx] = prof.output_len_dist.sample(rng, len(idx))
    return Trace([
        TraceRecord(float(times[i]), profiles[which[i]].service_id, int(inputs[i]), int(outputs[i]))
        for i in range(n)
    ])


def generate_diurnal_trace(
    profiles: Sequence[ServiceProfile],
    rate: float,
    duration: float,
    period: float = 600.0,
    amplitude: float = 0.8,
    burst_amplitude: float = 0.5,
    burst_period: float | None = None,
    seed: int = 0,
) -> Trace:
    """Azure-functions-like traffic: per-service sinusoidal popularity with phase offsets.

    The aggregate rate is ``rate * (1 + burst_amplitude * sin(2 pi t / burst_period))``
    and service ``k`` is drawn with weight ``1 + amplitude * sin(2 pi t / period + 2 pi k / n)``.
    Generated with Poisson thinning.
    """
    _check_profiles(profiles)
    if rate <= 0:
        raise ConfigError("rate must be > 0", key="trace.rate")
    if not 0 <= amplitude < 1 or not 0 <= burst_amplitude < 1:
        raise ConfigError("amplitudes must be in [0, 1)", key="trace")
    burst_period = burst_period or period / 3
    rng = np.random.default_rng(seed)
    n_svc = len(profiles)
    lam_max = rate * (1 + burst_amplitude)
    phases = 2 * np.pi * np.arange(n_svc) / n_svc
    records = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / lam_max)
        if t > duration:
            break
        lam = rate * (1 + burst_amplitude * math.sin(2 * math.pi * t / burst_period))
        if rng.random() * lam_max > lam:
            continue
        w = 1 + amplitude * np.sin(2 * np.pi * t / period + phases)
        k = int(rng.choice(n_svc, p=w / w.sum()))
        prof = profiles[k]
        records.append(TraceRecord(
            t, prof.service_id,
            int(prof.input_len_dist.sample(rng, 1)[0]),
            int(prof.output_len_dist.sample(rng, 1)[0]),
        ))
    return Trace(records)


def perturb_output_lengths(trace: Trace, noise_scale: float, seed: int = 0) -> list[int]:
    """Profiled output lengths: truth plus Gaussian noise of stddev ``noise_scale * truth``."""
    if noise_scale < 0:
        raise ConfigError("noise_scale must be >= 0", key="trace.noise_scale")
    truth = np.array([r.output_len for r in trace.records], dtype=float)
    if noise_scale == 0 or not len(truth):
        return [int(x) for x in truth]
    rng = np.random.default_rng(seed)
    noisy = truth + rng.normal(0.0, 1.0, size=len(truth)) * noise_scale * truth
    return [int(x) for x in np.maximum(1, np.rint(noisy))]


def save_trace(trace: Trace, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for rec in trace.records:
            writer.writerow((repr(float(rec.arrival_time)), rec.service_id, rec.input_len,
                             rec.output_len))


def load_trace(path: str | Path) -> Trace:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return Trace()
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise TraceParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                rec = TraceRecord(float(row[0]), row[1].strip(), int(row[2]), int(row[3]))
            except ValueError as exc:
                raise TraceParseError(str(exc), line=lineno) from None
            if rec.input_len < 1 or rec.output_len < 1:
                raise TraceValidationError(f"line {lineno}: lengths must be >= 1")
            if records and rec.arrival_time < records[-1].arrival_time:
                raise TraceValidationError(f"line {lineno}: arrival times must be non-decreasing")
            records.append(rec)
    return Trace(records)


def _exec_times(cm: CostModel, model_id: str, tp: int, inp: np.ndarray, out: np.ndarray) -> np.ndarray:
    e = cm.entry(model_id, tp)
    n = out - 1
    return (e.a_p + e.b_p * np.maximum(inp, 1)
            + n * (e.a_d + e.b_d + e.c_d * inp) + e.c_d * n * (n + 1) / 2)


def estimate_exec_stats(
    profile: ServiceProfile,
    cost_model: CostModel,
    tp_size: int | None = None,
    n_samples: int = 4000,
    seed: int = 0,
    method: str = "auto",
) -> tuple[float, float]:
    """Mean and standard deviation of isolated execution time.

    ``method`` is ``"exact"`` (enumerate finite supports), ``"mc"`` (Monte Carlo
    with at least 1000 samples), or ``"auto"`` (exact when both length
    distributions are finite with a small joint support).
    """
    tp = tp_size or profile.ref_tp
    cost_model.entry(profile.model_id, tp)
    si, so = profile.input_len_dist.support(), profile.output_len_dist.support()
    exact_ok = si is not None and so is not None and len(si[0]) * len(so[0]) <= 100_000
    if method == "exact" and not exact_ok:
        raise ValueError("exact enumeration needs finite length distributions")
    if method == "exact" or (method == "auto" and exact_ok):
        (iv, ip), (ov, op) = si, so
        inp, out = np.meshgrid(iv, ov, indexing="ij")
        prob = np.outer(ip, op)
        t = _exec_times(cost_model, profile.model_id, tp, inp, out)
        mean = float((prob * t).sum())
        var = float((prob * (t - mean) ** 2).sum())
        return mean, math.sqrt(max(var, 0.0))
    n = max(int(n_samples), 1000)
    rng = np.random.default_rng(seed)
    inp = profile.input_len_dist.sample(rng, n)
    out = profile.output_len_dist.sample(rng, n)
    t = _exec_times(cost_model, profile.model_id, tp, inp, out)
    return float(t.mean()), float(t.std())


def reference_tp(profile: ServiceProfile, cost_model: CostModel) -> int:
    spec = cost_model.model(profile.model_id)
    tps = [tp for tp in cost_model.tp_sizes(profile.model_id) if tp >= spec.min_tp]
    if not tps:
        raise ConfigError(f"no cost entry at tp >= {spec.min_tp}", key=f"models.{spec.model_id}")
    return tps[0]


def resolve_profiles(
    profiles: Sequence[ServiceProfile],
    cost_model: CostModel,
    slo_scale: float = 5.0,
    starvation_factor: float = 5.0,
    seed: int = 0,
) -> list[ServiceProfile]:
    """Fill in execution statistics, SLO, and starvation threshold where missing."""
    _check_profiles(profiles)
    out = []
    for prof in profiles:
        ref = reference_tp(prof, cost_model)
        prof = replace(prof, ref_tp=ref)
        if prof.mean_exec_time is None or prof.exec_time_stddev is None:
            mean, std = estimate_exec_stats(prof, cost_model, ref, seed=seed)
            prof = replace(prof,
                           mean_exec_time=prof.mean_exec_time or mean,
                           exec_time_stddev=std if prof.exec_time_stddev is None
                           else prof.exec_time_stddev)
        if prof.slo is None:
            prof = replace(prof, slo=slo_scale * prof.mean_exec_time)
        if prof.starvation_threshold is None:
            prof = replace(prof, starvation_threshold=starvation_factor * prof.slo)
        out.append(prof)
    return out


def profiles_with_observed_lengths(
    profiles: Sequence[ServiceProfile],
    trace: Trace,
    est_output_lens: Sequence[int],
    cost_model: CostModel,
    seed: int = 0,
) -> list[ServiceProfile]:
    """Re-estimate execution statistics from observed (possibly noisy) lengths."""
    by_service: dict[str, tuple[list[int], list[int]]] = {}
    for rec, est in zip(trace.records, est_output_lens):
        ins, outs = by_service.setdefault(rec.service_id, ([], []))
        ins.append(rec.input_len)
        outs.append(est)
    result = []
    for prof in profiles:
        if prof.service_id not in by_service:
            result.append(prof)
            continue
        ins, outs = by_service[prof.service_id]
        observed = replace(prof, input_len_dist=LengthDist.from_samples(ins),
                           output_len_dist=LengthDist.from_samples(outs))
        mean, std = estimate_exec_stats(observed, cost_model, prof.ref_tp, seed=seed, method="mc")
        result.append(replace(prof, mean_exec_time=mean, exec_time_stddev=std))
    return result


def _dist_from(raw, key: str) -> LengthDist:
    if raw is None:
        raise ConfigError("missing length distribution", key=key)
    if isinstance(raw, (int, float)):
        return LengthDist.point(int(raw))
    if "samples" in raw:
        return LengthDist.from_samples(int(x) for x in raw["samples"])
    try:
        return LengthDist(float(raw["mean"]), float(raw.get("stddev", 0.0)))
    except KeyError:
        raise ConfigError("distribution needs 'mean' or 'samples'", key=key) from None


def profiles_from_dict(data: Mapping | Sequence) -> list[ServiceProfile]:
    rows = data.get("services", []) if isinstance(data, Mapping) else data
    out = []
    seen = set()
    for i, raw in enumerate(rows):
        key = f"services[{i}]"
        try:
            sid = str(raw["service_id"])
            mid = str(raw["model_id"])
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]}", key=key) from None
        if sid in seen:
            raise ConfigError(f"duplicate service {sid!r}", key=key)
        seen.add(sid)
        opt = {k: (float(raw[k]) if raw.get(k) is not None else None)
               for k in ("mean_exec_time", "exec_time_stddev", "slo", "starvation_threshold")}
        out.append(ServiceProfile(sid, mid, _dist_from(raw.get("input"), key + ".input"),
                                  _dist_from(raw.get("output"), key + ".output"), **opt))
    _check_profiles(out)
    return out


def load_profiles(path: str | Path) -> list[ServiceProfile]:
    with open(path, encoding="utf-8") as fh:
        return profiles_from_dict(yaml.safe_load(fh) or {})


def _dist_to(d: LengthDist):
    if d.samples is not None:
        return {"samples": list(d.samples)}
    return {"mean": d.mean, "stddev": d.stddev}


def profiles_to_dict(profiles: Sequence[ServiceProfile]) -> dict:
    rows = []
    for p in profiles:
        row = {"service_id": p.service_id, "model_id": p.model_id,
               "input": _dist_to(p.input_len_dist), "output": _dist_to(p.output_len_dist)}
        for k in ("mean_exec_time", "exec_time_stddev", "slo", "starvation_threshold"):
            if getattr(p, k) is not None:
                row[k] = getattr(p, k)
        rows.append(row)
    return {"services": rows}


# Length summaries shaped after public chat / long-document summarisation / code datasets.
CHAT = (LengthDist(73.0, 40.0), LengthDist(427.0, 200.0))
SUMMARIZATION = (LengthDist(13187.0, 4000.0), LengthDist(21.0, 10.0))
CODE = (LengthDist(157.0, 60.0), LengthDist(67.0, 30.0))
