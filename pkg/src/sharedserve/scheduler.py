"""Request scheduling policies for one shared local engine.

Every policy keeps two lazily-invalidated priority queues per service (requests
waiting for prefill and requests in decoding) and builds batches of a single
service and a single phase.  Policies differ only in how they order requests
and how they pick the queue to draw the next batch from:

``db``    doubling-budget: priority = remaining budget x mean execution time,
          budgets double when exhausted, starved services first.
``fcfs``  the service of the oldest unfinished request runs, arrival order.
``rr``    services take turns every iteration, arrival order within a service.
``mlfq``  skip-join multi-level feedback queue with time quanta.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Mapping, Sequence

from .errors import SchedulerError
from .workload import DECODING, FINISHED, PREFILL, WAITING, Request, ServiceProfile

POLICIES = ("db", "fcfs", "rr", "mlfq")

# reserve(request, is_head, preempt_any) -> bool; the engine may evict KV for a head
Reserve = Callable[[Request, bool, bool], bool]


@dataclass
class BatchDecision:
    phase: str
    service_id: str
    requests: list[Request]
    triggered_by_starvation: bool = False

    @property
    def request_ids(self) -> list[int]:
        return [r.id for r in self.requests]

    def __len__(self) -> int:
        return len(self.requests)


@dataclass
class StepLimits:
    """How long a decision stays valid if nothing external happens.

    The engine repeats the batch for up to ``max_iters`` iterations, stopping
    after the first iteration whose cumulative wall time reaches ``span`` or
    whose end time passes ``deadline``.
    """

    max_iters: int = 1 << 30
    span: float = math.inf
    deadline: float = math.inf


class RequestQueue:
    """Min-heap keyed by policy priority with O(1) removal by id."""

    __slots__ = ("_heap", "_entries", "_count", "_age")

    def __init__(self):
        self._heap: list[list] = []
        self._entries: dict[int, list] = {}
        self._count = itertools.count()
        # second heap on enqueue time, for starvation checks
        self._age: list[tuple[float, int, int]] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __bool__(self) -> bool:
        return bool(self._entries)

    def __contains__(self, req: Request) -> bool:
        return req.id in self._entries

    def push(self, req: Request, key: tuple) -> None:
        entry = [key, next(self._count), req]
        self._entries[req.id] = entry
        heapq.heappush(self._heap, entry)
        heapq.heappush(self._age, (req.enqueue_time, req.id, entry[1]))

    def remove(self, req: Request) -> None:
        entry = self._entries.pop(req.id)
        entry[2] = None

    def _clean(self) -> None:
        heap = self._heap
        while heap and heap[0][2] is None:
            heapq.heappop(heap)

    def peek(self) -> Request | None:
        self._clean()
        return self._heap[0][2] if self._heap else None

    def peek_key(self) -> tuple | None:
        self._clean()
        return self._heap[0][0] if self._heap else None

    def pop(self) -> Request:
        self._clean()
        entry = heapq.heappop(self._heap)
        req = entry[2]
        del self._entries[req.id]
        return req

    def oldest_enqueue(self) -> float | None:
        age = self._age
        while age:
            t, rid, seq = age[0]
            entry = self._entries.get(rid)
            if entry is not None and entry[1] == seq:
                return t
            heapq.heappop(age)
        return None

    def requests(self) -> list[Request]:
        return [e[2] for e in self._entries.values()]


class Scheduler:
    """Shared queue bookkeeping; subclasses define ``key`` and ``_choose``."""

    name = "base"

    def __init__(
        self,
        profiles: Mapping[str, ServiceProfile],
        batch_cap: int = 32,
        services: Sequence[str] | None = None,
    ):
        if batch_cap < 1:
            raise ValueError("batch_cap must be >= 1")
        self.profiles = dict(profiles)
        self.batch_cap = batch_cap
        self.services = list(services if services is not None else self.profiles)
        self.wait = {s: RequestQueue() for s in self.services}
        self.decode = {s: RequestQueue() for s in self.services}
        self.requests: dict[int, Request] = {}
        self._order = itertools.count()

    # -- lifecycle -------------------------------------------------------------
    def key(self, req: Request) -> tuple:
        raise NotImplementedError

    def init_request(self, req: Request, now: float) -> None:
        pass

    def admit(self, req: Request, now: float, resumed: bool = False) -> None:
        """Add ``req`` to the wait queue.  ``resumed`` keeps budget state (migration)."""
        if req.id in self.requests:
            raise SchedulerError(f"request {req.id} admitted twice")
        if req.finished:
            raise SchedulerError(f"request {req.id} is already finished")
        if req.service_id not in self.wait:
            raise SchedulerError(f"service {req.service_id!r} is not served here")
        self.requests[req.id] = req
        if not (resumed and req.admitted):
            req.order = next(self._order)
            self.init_request(req, now)
        req.admitted = True
        req.phase = WAITING
        req.enqueue_time = now
        self.wait[req.service_id].push(req, self.key(req))

    def requeue(self, req: Request, now: float) -> None:
        """Put a request whose KV was evicted back into the wait queue."""
        req.phase = WAITING
        req.enqueue_time = now
        self.wait[req.service_id].push(req, self.key(req))

    def detach(self, req: Request) -> None:
        """Remove a queued request (eviction or migration)."""
        for queues in (self.wait, self.decode):
            q = queues[req.service_id]
            if req in q:
                q.remove(req)
                return
        raise SchedulerError(f"request {req.id} is not queued")

    def drain(self) -> list[Request]:
        """Remove and return every unfinished request (used on replacement)."""
        out = sorted(self.requests.values(), key=lambda r: r.id)
        self.requests.clear()
        for queues in (self.wait, self.decode):
            for q in queues.values():
                q.__init__()
        return out

    def __len__(self) -> int:
        return len(self.requests)

    def has_work(self) -> bool:
        return bool(self.requests)

    def queued(self) -> Iterator[Request]:
        for queues in (self.wait, self.decode):
            for s in self.services:
                yield from queues[s].requests()

    # -- decisions -------------------------------------------------------------
    def _choose(self, now: float) -> tuple[RequestQueue, str, bool] | None:
        """Return (queue, phase, starved) to draw the next batch from."""
        raise NotImplementedError

    def _global_min(self) -> tuple[RequestQueue, str] | None:
        best = None
        best_key = None
        for s in self.services:
            for q, phase in ((self.wait[s], PREFILL), (self.decode[s], DECODING)):
                k = q.peek_key()
                if k is not None and (best_key is None or k < best_key):
                    best, best_key = (q, phase), k
        return best

    def _fallbacks(self, first: RequestQueue) -> list[tuple[RequestQueue, str]]:
        """Other non-empty queues by head priority, tried when ``first`` cannot be served."""
        rest = []
        for s in self.services:
            for q, phase in ((self.wait[s], PREFILL), (self.decode[s], DECODING)):
                if q is not first and q:
                    rest.append((q.peek_key(), q, phase))
        rest.sort(key=lambda x: x[0])
        return [(q, phase) for _, q, phase in rest]

    def _oldest(self) -> tuple[Request, RequestQueue, str] | None:
        best = None
        for s in self.services:
            for q, phase in ((self.wait[s], PREFILL), (self.decode[s], DECODING)):
                for r in q.requests():
                    if best is None or (r.arrival_time, r.id) < (best[0].arrival_time, best[0].id):
                        best = (r, q, phase)
        return best

    def _fill(self, queue: RequestQueue, preempt_any: bool, reserve: Reserve | None,
              head: Request | None = None) -> list[Request]:
        batch: list[Request] = []
        if head is not None:
            if not reserve(head, True, preempt_any):
                return batch
            queue.remove(head)
            batch.append(head)
        while len(batch) < self.batch_cap:
            req = queue.peek()
            if req is None:
                break
            if reserve is not None and not reserve(req, not batch, preempt_any):
                break
            queue.pop()
            batch.append(req)
        return batch

    def next_batch(self, now: float, reserve: Reserve | None = None) -> BatchDecision | None:
        """Pick the next batch; returns ``None`` only when nothing can run.

        ``reserve(request, is_head, preempt_any)`` claims KV space.  If the
        preferred queue's head does not fit, the other queues are tried in
        priority order.  As a last resort the queue holding the oldest request
        runs with ``preempt_any``; every other KV holder arrived later and is
        evictable, so the engine cannot deadlock on a full cache.
        """
        choice = self._choose(now)
        if choice is None:
            return None
        queue, phase, starved = choice
        options = [(queue, phase, starved, None)]
        if reserve is not None:
            options += [(q, ph, False, None) for q, ph in self._fallbacks(queue)]
            oldest = self._oldest()
            if oldest is not None:
                req, q, ph = oldest
                options.append((q, ph, True, req))
        for i, (queue, phase, preempt, head) in enumerate(options):
            batch = self._fill(queue, preempt, reserve, head)
            if batch:
                for req in batch:
                    req.phase = PREFILL if phase == PREFILL else DECODING
                return BatchDecision(phase, batch[0].service_id, batch, starved and i == 0)
        return None

    def step_limits(self, batch: BatchDecision, now: float, tp_size: int) -> StepLimits:
        return StepLimits()

    def account_iteration(
        self, batch: BatchDecision, iteration_time: float, tp_size: int, now: float
    ) -> None:
        """Charge ``iteration_time`` (wall seconds, possibly several iterations) to the batch.

        The engine has already advanced token counts; finished requests leave,
        the rest return to the decode queue with refreshed priority.
        """
        for req in batch.requests:
            if req.id not in self.requests:
                raise SchedulerError(f"request {req.id} is unknown to the scheduler")
            self._charge(req, iteration_time, tp_size)
            if req.tokens_generated >= req.output_len:
                req.phase = FINISHED
                del self.requests[req.id]
            else:
                req.phase = DECODING
                self.decode[req.service_id].push(req, self.key(req))

    def _charge(self, req: Request, iteration_time: float, tp_size: int) -> None:
        pass

    def victim_order(self, head: Request, preempt_any: bool = False) -> list[Request]:
        """Queued decoding requests that ``head`` may evict, least deserving first.

        Victims must have arrived after ``head``; unless ``preempt_any`` they
        must also rank below it.  The arrival condition keeps eviction acyclic:
        a re-prefill can push a request's rank below its victim's, which would
        otherwise let the two evict each other indefinitely.
        """
        bound = self.key(head)
        age = (head.arrival_time, head.id)
        victims = [r for s in self.services for r in self.decode[s].requests()
                   if (r.arrival_time, r.id) > age and (preempt_any or self.key(r) > bound)]
        victims.sort(key=self.key, reverse=True)
        return victims


class DBScheduler(Scheduler):
    """Doubling-budget scheduling.

    ``oracle_exec_time`` (GPU-seconds for a request, from its true or profiled
    length) replaces the per-service budget so the priority tracks the true
    remaining time.
    """

    name = "db"

    def __init__(self, profiles, batch_cap=32, services=None,
                 oracle_exec_time: Callable[[Request], float] | None = None,
                 starvation: bool = True):
        super().__init__(profiles, batch_cap, services)
        self.oracle_exec_time = oracle_exec_time
        self.starvation = starvation

    def key(self, req: Request) -> tuple:
        return (req.priority, req.arrival_time, req.id)

    def init_request(self, req: Request, now: float) -> None:
        prof = self.profiles[req.service_id]
        if self.oracle_exec_time is not None:
            budget = self.oracle_exec_time(req)
        else:
            budget = prof.base_budget
        req.budget_remaining = budget
        req.budget_granted = budget
        req.budget_doublings = 0
        req.priority = budget * prof.gpu_mean_exec_time

    def _starved_queue(self, now: float) -> RequestQueue | None:
        if not self.starvation:
            return None
        best, best_t = None, None
        for s in self.services:
            q = self.wait[s]
            if not q:
                continue
            t = q.oldest_enqueue()
            if now - t > self.profiles[s].starvation_threshold and (best_t is None or t < best_t):
                best, best_t = q, t
        return best

    def _choose(self, now):
        starved = self._starved_queue(now)
        if starved is not None:
            return starved, PREFILL, True
        best = self._global_min()
        if best is None:
            return None
        return best[0], best[1], False

    def _charge(self, req: Request, iteration_time: float, tp_size: int) -> None:
        prof = self.profiles[req.service_id]
        req.budget_remaining -= iteration_time * tp_size
        req.priority = req.budget_remaining * prof.gpu_mean_exec_time
        if req.budget_remaining <= 0 and req.tokens_generated < req.output_len:
            self.double_budget(req)

    def double_budget(self, req: Request) -> None:
        prof = self.profiles[req.service_id]
        base = (self.oracle_exec_time(req) if self.oracle_exec_time is not None
                else prof.base_budget)
        req.budget_doublings += 1
        req.budget_granted = base * (2 ** req.budget_doublings)
        req.budget_remaining = req.budget_granted
        req.priority = req.budget_granted * prof.gpu_mean_exec_time

    def step_limits(self, batch, now, tp_size):
        span = min(r.budget_remaining for r in batch.requests) / tp_size
        deadline = math.inf
        if self.starvation:
            for s in self.services:
                q = self.wait[s]
                if q:
                    deadline = min(deadline, q.oldest_enqueue() + self.profiles[s].starvation_threshold)
        return StepLimits(span=span, deadline=deadline)


class FCFSScheduler(Scheduler):
    """Oldest unfinished request decides the service; its new arrivals prefill first."""

    name = "fcfs"

    def key(self, req):
        return (req.arrival_time, req.id)

    def _choose(self, now):
        best = self._global_min()
        if best is None:
            return None
        s = best[0].peek().service_id
        if self.wait[s]:
            return self.wait[s], PREFILL, False
        return self.decode[s], DECODING, False


class RRScheduler(Scheduler):
    """Services take turns at every iteration; FCFS inside a service, prefill first."""

    name = "rr"

    def __init__(self, profiles, batch_cap=32, services=None):
        super().__init__(profiles, batch_cap, services)
        self._next = 0

    def key(self, req):
        return (req.arrival_time, req.id)

    def _busy_services(self) -> list[int]:
        return [i for i, s in enumerate(self.services) if self.wait[s] or self.decode[s]]

    def _choose(self, now):
        n = len(self.services)
        for off in range(n):
            i = (self._next + off) % n
            s = self.services[i]
            if self.wait[s] or self.decode[s]:
                self._next = (i + 1) % n
                if self.wait[s]:
                    return self.wait[s], PREFILL, False
                return self.decode[s], DECODING, False
        return None

    def step_limits(self, batch, now, tp_size):
        others = [i for i in self._busy_services() if self.services[i] != batch.service_id]
        return StepLimits(max_iters=1 if others else 1 << 30)


class MLFQScheduler(Scheduler):
    """Skip-join MLFQ: a request enters the first level whose quantum covers its prefill time.

    Level ``i`` has quantum ``base_quantum * quantum_ratio**i``; the last level
    has no quantum.  Demotion happens after a request has received a full
    quantum of wall time at its level.
    """

    name = "mlfq"

    def __init__(self, profiles, batch_cap=32, services=None, num_levels=4,
                 quantum_ratio=2.0, base_quantum=0.05,
                 prefill_estimate: Callable[[Request], float] | None = None):
        super().__init__(profiles, batch_cap, services)
        if num_levels < 1 or quantum_ratio <= 0 or base_quantum <= 0:
            raise ValueError("invalid MLFQ parameters")
        self.num_levels = num_levels
        self.quanta = [base_quantum * quantum_ratio ** i for i in range(num_levels - 1)] + [math.inf]
        self.prefill_estimate = prefill_estimate

    def key(self, req):
        return (req.mlfq_level, req.order)

    def init_request(self, req, now):
        level = 0
        if self.prefill_estimate is not None:
            est = self.prefill_estimate(req)
            while level < self.num_levels - 1 and self.quanta[level] < est:
                level += 1
        req.mlfq_level = level
        req.mlfq_attained = 0.0

    def _choose(self, now):
        best = self._global_min()
        if best is None:
            return None
        return best[0], best[1], False

    def _charge(self, req, iteration_time, tp_size):
        req.mlfq_attained += iteration_time
        if req.mlfq_attained >= self.quanta[req.mlfq_level]:
            req.mlfq_level += 1
            req.mlfq_attained = 0.0
            req.order = next(self._order)

    def step_limits(self, batch, now, tp_size):
        span = min(self.quanta[r.mlfq_level] - r.mlfq_attained for r in batch.requests)
        return StepLimits(span=span)


def make_scheduler(policy: str, profiles, batch_cap=32, services=None, **kwargs) -> Scheduler:
    if policy == "db":
        return DBScheduler(profiles, batch_cap, services,
                           oracle_exec_time=kwargs.get("oracle_exec_time"),
                           starvation=kwargs.get("starvation", True))
    if policy == "fcfs":
        return FCFSScheduler(profiles, batch_cap, services)
    if policy == "rr":
        return RRScheduler(profiles, batch_cap, services)
    if policy == "mlfq":
        opts = {k: kwargs[k] for k in ("num_levels", "quantum_ratio", "base_quantum",
                                       "prefill_estimate") if kwargs.get(k) is not None}
        return MLFQScheduler(profiles, batch_cap, services, **opts)
    raise ValueError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")


# -- optimality oracle ----------------------------------------------------------

@dataclass(frozen=True)
class OracleJob:
    arrival_time: float
    service_id: str
    iterations: int


@dataclass
class OracleResult:
    norm_latency: float
    schedule: list[int] = field(default_factory=list)
    completion_times: list[float] = field(default_factory=list)


MAX_ORACLE_REQUESTS = 8


def brute_force_optimal(
    jobs: Sequence[OracleJob],
    mean_exec_time: Mapping[str, float],
    quantum: float,
) -> OracleResult:
    """Minimum of sum(latency / mean_exec_time) over every preemptive single-server schedule.

    Work is quantised into iterations of ``quantum`` seconds with batch size
    one; a scheduling decision happens at every iteration boundary.  Idling
    never helps this objective, and in a non-idling schedule the start time of
    the ``w``-th iteration depends only on ``w``, so memoising on the vector of
    remaining iterations enumerates every schedule exactly once.
    """
    jobs = list(jobs)
    if len(jobs) > MAX_ORACLE_REQUESTS:
        raise ValueError(f"brute force is limited to {MAX_ORACLE_REQUESTS} requests")
    if not jobs:
        return OracleResult(0.0)
    n = len(jobs)
    arrivals = [j.arrival_time for j in jobs]
    work = [j.iterations for j in jobs]
    if min(work) < 1:
        raise ValueError("every job needs at least one iteration")
    weights = [1.0 / mean_exec_time[j.service_id] for j in jobs]
    total = sum(work)

    # start[w]: start time of the (w+1)-th iteration in any non-idling schedule
    order = sorted(range(n), key=lambda i: (arrivals[i], i))
    start = []
    prev_end = 0.0
    released = 0
    k = 0
    for w in range(total):
        while released <= w:
            released += work[order[k]]
            avail = arrivals[order[k]]
            k += 1
            prev_end = max(prev_end, avail)
        start.append(prev_end)
        prev_end = prev_end + quantum

    @lru_cache(maxsize=None)
    def best(remaining: tuple[int, ...]) -> tuple[float, int]:
        done = total - sum(remaining)
        if done == total:
            return 0.0, -1
        t0 = start[done]
        t1 = t0 + quantum
        best_cost, best_job = math.inf, -1
        for i in range(n):
            if remaining[i] == 0 or arrivals[i] > t0:
                continue
            nxt = remaining[:i] + (remaining[i] - 1,) + remaining[i + 1:]
            cost = best(nxt)[0]
            if remaining[i] == 1:
                cost += (t1 - arrivals[i]) * weights[i]
            if cost < best_cost - 1e-12:
                best_cost, best_job = cost, i
        return best_cost, best_job

    rem = tuple(work)
    value = best(rem)[0]
    schedule, completions = [], [0.0] * n
    done = 0
    while any(rem):
        i = best(rem)[1]
        schedule.append(i)
        if rem[i] == 1:
            completions[i] = start[done] + quantum
        rem = rem[:i] + (rem[i] - 1,) + rem[i + 1:]
        done += 1
    best.cache_clear()
    return OracleResult(value, schedule, completions)


def schedule_norm_latency(
    jobs: Sequence[OracleJob], mean_exec_time: Mapping[str, float], quantum: float,
    priority: Callable[[OracleJob, int], float],
) -> float:
    """Normalized latency of a greedy priority rule on the quantised model.

    ``priority(job, remaining_iterations)``: smaller runs first; ties by arrival then index.
    """
    n = len(jobs)
    rem = [j.iterations for j in jobs]
    t = 0.0
    total = 0.0
    left = n
    while left:
        ready = [i for i in range(n) if rem[i] and jobs[i].arrival_time <= t]
        if not ready:
            t = min(jobs[i].arrival_time for i in range(n) if rem[i])
            continue
        i = min(ready, key=lambda i: (priority(jobs[i], rem[i]), jobs[i].arrival_time, i))
        rem[i] -= 1
        t += quantum
        if rem[i] == 0:
            total += (t - jobs[i].arrival_time) / mean_exec_time[jobs[i].service_id]
            left -= 1
    return total
