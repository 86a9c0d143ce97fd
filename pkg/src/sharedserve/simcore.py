"""Event-driven simulation of a GPU cluster serving several LLM services.

Each engine is one TP group running one scheduler over its services.  By
default consecutive iterations of an unchanged batch are simulated as a single
macro step; the step records every iteration boundary so it can be cut short
when a request arrives or a replacement happens, which makes the result match
iteration-by-iteration simulation.
"""

from __future__ import annotations

import heapq
import itertools
import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

from .costmodel import CostModel, GpuSpec
from .errors import CacheFull, ConfigError, SchedulerError
from .kvcache import DEFAULT_TOKENS_PER_BLOCK, UnifiedKvCache
from .plan import EngineSpec, PlacementPlan, engine_kv_blocks
from .scheduler import PREFILL, BatchDecision, Scheduler, make_scheduler
from .workload import WAITING, Request, ServiceProfile, Trace

ARRIVAL, COMPLETE, REPLACE = 0, 1, 2


@dataclass
class SimConfig:
    policy: str = "db"
    batch_cap: int = 32
    tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK
    fast_forward: bool = True
    starvation: bool = True
    oracle_lengths: bool = False
    mlfq_levels: int = 4
    mlfq_ratio: float = 2.0
    mlfq_base_quantum: float | None = None
    migration_pause: float = 5.0
    record_log: bool = True


@dataclass
class ReplacementDecision:
    plan: PlacementPlan | None
    next_time: float | None
    detail: dict = field(default_factory=dict)


class ReplacementHook(Protocol):
    def start(self, sim: "Simulator") -> float | None: ...

    def on_interval_end(self, sim: "Simulator", now: float) -> ReplacementDecision: ...


@dataclass
class Step:
    batch: BatchDecision
    start: float
    cum: list[float]  # cumulative wall time after each iteration
    ends: list[float]


@dataclass
class SimResult:
    requests: list[Request]
    log: list[dict]
    end_time: float
    kv_stats: list[dict]
    plan_history: list[tuple[float, PlacementPlan]]
    intervals: list[float] = field(default_factory=list)
    busy_time: float = 0.0
    decisions: int = 0


class Engine:
    def __init__(self, idx: int, spec: EngineSpec, cm: CostModel,
                 profiles: Mapping[str, ServiceProfile], config: SimConfig, gpu: GpuSpec,
                 ready_time: float = 0.0):
        self.idx = idx
        self.spec = spec
        self.tp = spec.tp
        self.cm = cm
        self.config = config
        self.model_of = {s: profiles[s].model_id for s in spec.services}
        model_ids = list(dict.fromkeys(self.model_of.values()))
        blocks = spec.kv_blocks
        if blocks is None:
            # every service carries its own copy of the weights
            blocks = engine_kv_blocks(cm, gpu, list(self.model_of.values()), self.tp,
                                      config.batch_cap, config.tokens_per_block)
        self.kv = UnifiedKvCache([cm.model(m) for m in model_ids], max(blocks, 0),
                                 config.tokens_per_block, self.tp)
        sub = {s: profiles[s] for s in spec.services}
        kwargs: dict = {"starvation": config.starvation}
        if config.oracle_lengths:
            kwargs["oracle_exec_time"] = self._oracle_exec_time
        if config.policy == "mlfq":
            base = config.mlfq_base_quantum
            if base is None:
                base = min(cm.prefill_time(self.model_of[s], self.tp,
                                           max(1, round(sub[s].input_len_dist.mean)))
                           for s in spec.services)
            kwargs.update(num_levels=config.mlfq_levels, quantum_ratio=config.mlfq_ratio,
                          base_quantum=base, prefill_estimate=self._prefill_estimate)
        self.profiles = sub
        self.scheduler: Scheduler = make_scheduler(config.policy, sub, config.batch_cap,
                                                   list(spec.services), **kwargs)
        self.step: Step | None = None
        self.version = 0
        self.ready_time = ready_time
        self.wake_pending = False
        self.busy_time = 0.0
        self.decisions = 0

    def _oracle_exec_time(self, req: Request) -> float:
        prof = self.profiles[req.service_id]
        out = req.est_output_len if req.est_output_len is not None else req.output_len
        t = self.cm.isolated_exec_time(prof.model_id, prof.ref_tp, req.input_len, out)
        return t * prof.ref_tp

    def _prefill_estimate(self, req: Request) -> float:
        return self.cm.prefill_time(self.model_of[req.service_id], self.tp, req.input_len)

    def lifetime_fits(self, req: Request) -> bool:
        model = self.model_of[req.service_id]
        return self.kv.blocks_for(req.input_len + req.output_len) <= self.kv.total_native_capacity(model)

    # -- one decision ----------------------------------------------------------
    def _reserve_tokens(self, req: Request, target: int) -> None:
        need = target - self.kv.held_tokens(req.id)
        self.kv.allocate_blocks(req.id, self.model_of[req.service_id], max(need, 0))

    def plan_step(self, now: float, log: list | None) -> Step | None:
        evicted: list[Request] = []
        sched = self.scheduler

        def reserve(req: Request, is_head: bool, preempt_any: bool) -> bool:
            target = req.context_len + 1
            try:
                self._reserve_tokens(req, target)
                return True
            except CacheFull:
                if not is_head:
                    return False
            victims = sched.victim_order(req, preempt_any)
            if not self._eviction_can_fit(req, target, victims):
                return False
            for victim in victims:
                sched.detach(victim)
                self.kv.free_request(victim.id)
                victim.kv_tokens = 0
                victim.evictions += 1
                evicted.append(victim)
                try:
                    self._reserve_tokens(req, target)
                    return True
                except CacheFull:
                    continue
            return False

        batch = sched.next_batch(now, reserve)
        for v in evicted:
            sched.requeue(v, now)
            if log is not None:
                log.append({"t": now, "event": "evict", "req": v.id, "engine": self.idx})
        if batch is None:
            return None
        self.decisions += 1
        model = self.model_of[batch.service_id]
        cum: list[float] = []
        if batch.phase == PREFILL:
            cum.append(self.cm.prefill_time(model, self.tp, sum(r.context_len for r in batch.requests)))
        else:
            reqs = batch.requests
            k = min(r.output_len - r.tokens_generated for r in reqs)
            span = deadline = math.inf
            if self.config.fast_forward:
                lim = sched.step_limits(batch, now, self.tp)
                k = min(k, lim.max_iters)
                span, deadline = lim.span, lim.deadline
                k = self._kv_bound(reqs, k)
                if evicted:
                    # freed KV may let a queue skipped in this decision run at the next one
                    k = 1
                if k > 1:
                    for r in reqs:
                        self._reserve_tokens(r, r.context_len + k)
            else:
                k = 1
            b = len(reqs)
            ctx = sum(r.context_len for r in reqs)
            s = 0.0
            for j in range(k):
                s += self.cm.decode_time(model, self.tp, b, ctx + b * j)
                cum.append(s)
                if s >= span or now + s > deadline:
                    break
        return Step(batch, now, cum, [now + c for c in cum])

    def _eviction_can_fit(self, req: Request, target: int, victims: Sequence[Request]) -> bool:
        """Byte-level check that evicting every victim would make room for ``req``."""
        kv = self.kv
        model = self.model_of[req.service_id]
        unit = kv.shapes[model].bytes_per_native_block
        need = kv.blocks_for(target) - kv.held_blocks(req.id)
        room = kv.capacity(model) * unit
        for v in victims:
            room += kv.held_blocks(v.id) * kv.shapes[self.model_of[v.service_id]].bytes_per_native_block
        return room >= need * unit

    def _kv_bound(self, reqs: Sequence[Request], k: int) -> int:
        """Largest j <= k such that every request can grow to j more tokens."""
        if k <= 1:
            return max(k, 1)
        kv = self.kv
        cap = kv.capacity(self.model_of[reqs[0].service_id])
        held = [(r.context_len, kv.held_blocks(r.id)) for r in reqs]

        def need(j: int) -> int:
            return sum(max(0, kv.blocks_for(c + j) - h) for c, h in held)

        if need(k) <= cap:
            return k
        lo, hi = 1, k  # need(lo) fits, need(hi) does not
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if need(mid) <= cap:
                lo = mid
            else:
                hi = mid
        return lo

    def apply(self, step: Step, iters: int) -> list[Request]:
        """Commit the first ``iters`` iterations of ``step``; returns finished requests."""
        span = step.cum[iters - 1]
        end = step.start + span
        batch = step.batch
        prefill = batch.phase == PREFILL
        for r in batch.requests:
            r.tokens_generated += 1 if prefill else iters
            if r.first_token_time is None:
                r.first_token_time = end
            r.kv_tokens = r.context_len
            if r.tokens_generated >= r.output_len:
                r.finish_time = end
        self.scheduler.account_iteration(batch, span, self.tp, end)
        done = []
        for r in batch.requests:
            if r.finish_time is not None:
                self.kv.free_request(r.id)
                done.append(r)
            elif self.kv.held_tokens(r.id) > r.context_len:
                # a truncated step gives back KV reserved for iterations that did not run
                self.kv.shrink_to(r.id, r.context_len)
        self.busy_time += span
        return done

    def in_flight(self) -> list[Request]:
        return list(self.step.batch.requests) if self.step else []


class Simulator:
    def __init__(self, cost_model: CostModel, profiles: Mapping[str, ServiceProfile] | Sequence[ServiceProfile],
                 plan: PlacementPlan, config: SimConfig | None = None, gpu: GpuSpec | None = None,
                 replacement: ReplacementHook | None = None):
        if not isinstance(profiles, Mapping):
            profiles = {p.service_id: p for p in profiles}
        for p in profiles.values():
            if not p.resolved:
                raise ConfigError("profile is missing execution statistics or SLO",
                                  key=f"services.{p.service_id}")
        self.cm = cost_model
        self.profiles = dict(profiles)
        self.config = config or SimConfig()
        self.gpu = gpu or GpuSpec()
        self.replacement = replacement
        self.plan = plan
        self.engines: list[Engine] = []
        self.now = 0.0

    # -- setup -------------------------------------------------------------------
    def _build(self, plan: PlacementPlan, ready_time: float) -> None:
        self._set_engines([Engine(i, spec, self.cm, self.profiles, self.config, self.gpu, ready_time)
                           for i, spec in enumerate(plan.engines)])

    def _set_engines(self, engines: list[Engine]) -> None:
        self.engines = engines
        self._replicas: dict[str, list[Engine]] = {}
        for e in self.engines:
            for s in e.spec.services:
                self._replicas.setdefault(s, []).append(e)
        missing = set(self.profiles) - set(self._replicas)
        if missing:
            raise ConfigError(f"services without an engine: {sorted(missing)}", key="placement")

    def _push(self, t: float, kind: int, payload) -> None:
        heapq.heappush(self._events, (t, kind, next(self._seq), payload))

    def _log(self, **rec) -> None:
        if self._records is not None:
            self._records.append(rec)

    # -- helpers used by the replacement hook ------------------------------------
    def completed_between(self, t0: float, t1: float) -> list[Request]:
        """Requests that finished in (t0, t1], or were marked unservable in it."""
        lo = bisect_right(self._finish_times, t0)
        hi = bisect_right(self._finish_times, t1)
        return self._finished[lo:hi]

    def trace_window(self, t0: float, t1: float) -> Trace:
        return self.trace.window(t0, t1)

    # -- main loop ---------------------------------------------------------------
    def run(self, trace: Trace, est_output_lens: Sequence[int] | None = None) -> SimResult:
        trace.validate(self.profiles)
        self.trace = trace
        self._events: list = []
        self._seq = itertools.count()
        self._records: list[dict] | None = [] if self.config.record_log else None
        self._finished: list[Request] = []
        self._finish_times: list[float] = []
        self._busy_retired = 0.0
        self._decisions_retired = 0
        self._build(self.plan, 0.0)
        self.plan_history = [(0.0, self.plan)]
        self.intervals: list[float] = []
        requests = trace.to_requests(est_output_lens)
        last_arrival = requests[-1].arrival_time if requests else 0.0
        if self.replacement is not None:
            first = self.replacement.start(self)
            if first is not None and first < last_arrival:
                self._push(first, REPLACE, None)

        ptr, n = 0, len(requests)
        events = self._events
        while True:
            next_arrival = requests[ptr].arrival_time if ptr < n else math.inf
            if events and (events[0][0], events[0][1]) < (next_arrival, ARRIVAL):
                t, kind, _, payload = heapq.heappop(events)
                self.now = t
                if kind == COMPLETE:
                    engine, version = payload
                    if engine.version == version and engine in self.engines:
                        self._on_complete(engine, t)
                else:
                    self._on_replace(t, last_arrival)
            elif ptr < n:
                req = requests[ptr]
                ptr += 1
                self.now = req.arrival_time
                self._log(t=req.arrival_time, event="arrival", req=req.id, service=req.service_id)
                self._dispatch(req, req.arrival_time)
            else:
                break

        stuck = [e.idx for e in self.engines if e.scheduler.has_work()]
        if stuck:
            raise SchedulerError(f"engines {stuck} stopped with queued requests")
        return SimResult(
            requests=requests,
            log=self._records or [],
            end_time=self.now,
            kv_stats=[e.kv.stats().to_dict() for e in self.engines],
            plan_history=self.plan_history,
            intervals=self.intervals,
            busy_time=self._busy_retired + sum(e.busy_time for e in self.engines),
            decisions=self._decisions_retired + sum(e.decisions for e in self.engines),
        )

    def _dispatch(self, req: Request, now: float, resumed: bool = False) -> None:
        replicas = [e for e in self._replicas[req.service_id] if e.lifetime_fits(req)]
        if not replicas:
            req.unservable = True
            req.phase = WAITING
            self._finished.append(req)
            self._finish_times.append(now)
            self._log(t=now, event="unservable", req=req.id, service=req.service_id)
            return
        engine = min(replicas, key=lambda e: (len(e.scheduler), e.idx))
        req.engine_id = engine.idx
        engine.scheduler.admit(req, now, resumed=resumed)
        self._log(t=now, event="dispatch", req=req.id, engine=engine.idx)
        if engine.step is None:
            self._try_start(engine, now)
        else:
            self._truncate(engine, now)

    def _try_start(self, engine: Engine, now: float) -> None:
        if engine.step is not None:
            return
        if now < engine.ready_time:
            if not engine.wake_pending:
                engine.wake_pending = True
                engine.version += 1
                self._push(engine.ready_time, COMPLETE, (engine, engine.version))
            return
        engine.wake_pending = False
        step = engine.plan_step(now, self._records)
        if step is None:
            return
        engine.step = step
        engine.version += 1
        b = step.batch
        self._log(t=now, event="batch", engine=engine.idx, service=b.service_id, phase=b.phase,
                  reqs=b.request_ids, starved=b.triggered_by_starvation)
        self._push(step.ends[-1], COMPLETE, (engine, engine.version))

    def _truncate(self, engine: Engine, t: float) -> None:
        step = engine.step
        j = bisect_left(step.ends, t)
        if j + 1 < len(step.ends):
            del step.ends[j + 1:]
            del step.cum[j + 1:]
            engine.version += 1
            self._push(step.ends[-1], COMPLETE, (engine, engine.version))

    def _commit(self, engine: Engine, step: Step, iters: int, t: float) -> None:
        first_pending = [r for r in step.batch.requests if r.tokens_generated == 0]
        done = engine.apply(step, iters)
        for r in first_pending:
            self._log(t=t, event="first_token", req=r.id)
        for r in done:
            self._finished.append(r)
            self._finish_times.append(t)
            self._log(t=t, event="finish", req=r.id, service=r.service_id)

    def _on_complete(self, engine: Engine, t: float) -> None:
        step = engine.step
        if step is None:
            self._try_start(engine, t)
            return
        engine.step = None
        self._commit(engine, step, len(step.ends), t)
        self._try_start(engine, t)

    def _on_replace(self, t: float, last_arrival: float) -> None:
        decision = self.replacement.on_interval_end(self, t)
        changed = decision.plan is not None and decision.plan != self.plan
        if changed:
            self._migrate(t, decision.plan)
        self._log(t=t, event="replacement", changed=changed, **decision.detail)
        if decision.next_time is not None:
            self.intervals.append(decision.next_time - t)
            if decision.next_time < last_arrival:
                self._push(decision.next_time, REPLACE, None)

    def _migrate(self, t: float, plan: PlacementPlan) -> None:
        """Switch to ``plan``.  Engines whose GPUs and services are unchanged keep running;
        the others stop at the last completed iteration, and their requests are
        re-dispatched with KV recomputed once the new engines are up."""
        kept = {e.spec.key(): e for e in self.engines}
        reuse = {spec.key() for spec in plan.engines} & set(kept)
        moving: dict[int, Request] = {}
        for e in self.engines:
            if e.spec.key() in reuse:
                continue
            step = e.step
            if step is not None:
                done_iters = bisect_right(step.ends, t)
                if done_iters:
                    self._commit(e, step, done_iters, t)
                else:
                    for r in step.batch.requests:
                        moving[r.id] = r
                e.step = None
            for r in e.scheduler.drain():
                moving[r.id] = r
            e.version += 1
            self._busy_retired += e.busy_time
            self._decisions_retired += e.decisions
        engines = []
        for i, spec in enumerate(plan.engines):
            e = kept.get(spec.key()) if spec.key() in reuse else None
            if e is None:
                e = Engine(i, spec, self.cm, self.profiles, self.config, self.gpu,
                           t + self.config.migration_pause)
            e.idx = i
            engines.append(e)
        self.plan = plan
        self.plan_history.append((t, plan))
        self._set_engines(engines)
        for rid in sorted(moving):
            r = moving[rid]
            r.kv_tokens = 0
            r.phase = WAITING
            self._dispatch(r, t, resumed=True)

def simulate(cost_model: CostModel, profiles, plan: PlacementPlan, trace: Trace,
             config: SimConfig | None = None, gpu: GpuSpec | None = None,
             est_output_lens: Sequence[int] | None = None) -> SimResult:
    return Simulator(cost_model, profiles, plan, config, gpu).run(trace, est_output_lens)
