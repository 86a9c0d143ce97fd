"""Two-stage placement search.

Stage one partitions every node into equal TP groups (one candidate per power
of two up to the node size), merging groups where a model needs more GPUs.
Stage two fills the groups service by service, always placing the service
with the highest unserved index on the least loaded group that can take it.
Candidates are compared by simulated SLO attainment, then mean normalized
latency.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .costmodel import CostModel, GpuSpec
from .errors import InfeasiblePlacement
from .plan import EngineSpec, PlacementPlan, free_kv_bytes
from .simcore import SimConfig, Simulator
from .workload import ServiceProfile, Trace, TraceRecord

DEFAULT_ALPHA = 1e-4
DEFAULT_SHARE_CAP = 2
# KV room that must remain after weights, in tokens of the largest context a
# model is expected to hold
DEFAULT_MIN_KV_TOKENS = 16384


@dataclass
class Group:
    node: int
    start: int  # first GPU index within the node
    size: int
    services: list[str] = field(default_factory=list)

    def gpu_ids(self, gpus_per_node: int) -> tuple[int, ...]:
        base = self.node * gpus_per_node + self.start
        return tuple(range(base, base + self.size))


@dataclass
class PlacementContext:
    cost_model: CostModel
    profiles: dict[str, ServiceProfile]
    gpu: GpuSpec
    sim_config: SimConfig = field(default_factory=SimConfig)
    share_cap: int = DEFAULT_SHARE_CAP
    alpha: float = DEFAULT_ALPHA
    max_replicas: int | None = None
    min_kv_tokens: int = DEFAULT_MIN_KV_TOKENS
    slo_scale: float = 5.0

    def fits(self, service_ids: Sequence[str], tp: int) -> bool:
        """Memory check for a group of ``tp`` GPUs hosting ``service_ids``."""
        cm = self.cost_model
        models = [self.profiles[s].model_id for s in service_ids]
        for m in set(models):
            spec = cm.model(m)
            if tp < spec.min_tp or spec.num_heads % tp or not cm.has_entry(m, tp):
                return False
        room = free_kv_bytes(cm, self.gpu, models, tp, self.sim_config.batch_cap)
        need = max(cm.model(m).kv_bytes_per_token(tp) for m in models) * self.min_kv_tokens
        return room >= need

    def min_group_size(self, service_id: str) -> int:
        size = 1
        while size <= self.gpu.gpus_per_node:
            if self.fits([service_id], size):
                return size
            size *= 2
        raise InfeasiblePlacement(
            f"model {self.profiles[service_id].model_id!r} of service {service_id!r} "
            f"does not fit in a node of {self.gpu.gpus_per_node} GPUs")


# -- stage one -------------------------------------------------------------------

def _placeable(groups: Sequence[Group], ctx: PlacementContext) -> str | None:
    """Greedy check that every service fits some group; returns the first that does not."""
    load: dict[int, list[str]] = {i: [] for i in range(len(groups))}
    order = sorted(ctx.profiles, key=lambda s: -ctx.min_group_size(s))
    for s in order:
        for i, g in sorted(enumerate(groups), key=lambda x: (x[1].size, x[0])):
            cur = load[i]
            if len(cur) < ctx.share_cap and ctx.fits(cur + [s], g.size):
                cur.append(s)
                break
        else:
            return s
    return None


def _merge_once(groups: list[Group], need: int, gpus_per_node: int) -> bool:
    """Double the largest group smaller than ``need``, absorbing its aligned buddy range."""
    cands = sorted(
        (g for g in groups if g.size < need),
        key=lambda g: (-g.size, g.node, g.start),
    )
    for g in cands:
        lo, hi = g.start, g.start + 2 * g.size
        if g.start % (2 * g.size) or hi > gpus_per_node:
            continue
        buddies = [h for h in groups if h.node == g.node and h is not g and lo <= h.start < hi]
        if any(h.size > g.size for h in buddies):
            continue
        for h in buddies:
            groups.remove(h)
        g.size *= 2
        return True
    return False


def enumerate_partitions(ctx: PlacementContext) -> list[list[Group]]:
    """One partition per power-of-two TP size, merged until every service fits."""
    m = ctx.gpu.gpus_per_node
    for s in ctx.profiles:
        ctx.min_group_size(s)
    out = []
    tp = 1
    while tp <= m:
        groups = [Group(n, k * tp, tp) for n in range(ctx.gpu.num_nodes) for k in range(m // tp)]
        while True:
            bad = _placeable(groups, ctx)
            if bad is None:
                out.append(groups)
                break
            if not _merge_once(groups, ctx.min_group_size(bad), m):
                break
        tp *= 2
    if not out:
        raise InfeasiblePlacement("no partition can host every service")
    return out


# -- stage two -------------------------------------------------------------------

@dataclass(frozen=True)
class ServiceStats:
    requests: int = 0
    unserved: int = 0
    finished: int = 0
    l_n_sum: float = 0.0
    slo_met: int = 0

    def unserved_index(self, alpha: float) -> float:
        l_n = self.l_n_sum / self.finished if self.finished else 0.0
        return self.unserved + alpha * l_n


def _deadline(ctx: PlacementContext, req) -> float:
    prof = ctx.profiles[req.service_id]
    iso = ctx.cost_model.isolated_exec_time(prof.model_id, prof.ref_tp, req.input_len, req.output_len)
    return ctx.slo_scale * iso


class Evaluator:
    """Simulates a history under partial plans.

    Engines that share no service never interact, so a plan is split into
    connected components and each component is simulated on its own slice of
    the history.  Results are memoised by component shape (TP sizes and
    services), which is all the simulation depends on.
    """

    def __init__(self, ctx: PlacementContext, history: Trace):
        self.ctx = ctx
        self.records: dict[str, list[tuple[int, TraceRecord]]] = {s: [] for s in ctx.profiles}
        for i, rec in enumerate(history.records):
            self.records[rec.service_id].append((i, rec))
        self.cache: dict[tuple, dict[str, ServiceStats]] = {}
        self.cfg = replace(ctx.sim_config, record_log=False, policy="db")
        self.runs = 0

    def _simulate(self, shapes: tuple) -> dict[str, ServiceStats]:
        cached = self.cache.get(shapes)
        if cached is not None:
            return cached
        ctx = self.ctx
        services = sorted({s for _, svcs in shapes for s in svcs})
        recs = [rec for _, rec in heapq.merge(*(self.records[s] for s in services))]
        engines, nxt = [], 0
        for tp, svcs in shapes:
            engines.append(EngineSpec(tuple(range(nxt, nxt + tp)), svcs))
            nxt += tp
        sim = Simulator(ctx.cost_model, {s: ctx.profiles[s] for s in services},
                        PlacementPlan(engines), self.cfg, ctx.gpu)
        res = sim.run(Trace(recs))
        self.runs += 1
        acc = {s: [0, 0, 0, 0.0, 0] for s in services}
        for r in res.requests:
            st = acc[r.service_id]
            st[0] += 1
            if r.unservable:
                st[1] += 1
                continue
            lat = r.finish_time - r.arrival_time
            deadline = _deadline(ctx, r)
            st[2] += 1
            st[3] += lat / ctx.profiles[r.service_id].mean_exec_time
            st[1] += lat >= deadline
            st[4] += lat < deadline
        out = {s: ServiceStats(*v) for s, v in acc.items()}
        self.cache[shapes] = out
        return out

    def evaluate(self, groups: Sequence[tuple[int, Sequence[str]]]) -> dict[str, ServiceStats]:
        """Per-service stats for engines given as (tp, services); unplaced services are all unserved."""
        live = [(tp, tuple(sorted(svcs))) for tp, svcs in groups if svcs]
        parent = list(range(len(live)))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        owner: dict[str, int] = {}
        for i, (_, svcs) in enumerate(live):
            for s in svcs:
                if s in owner:
                    parent[find(i)] = find(owner[s])
                else:
                    owner[s] = i
        comps: dict[int, list] = {}
        for i, g in enumerate(live):
            comps.setdefault(find(i), []).append(g)
        result: dict[str, ServiceStats] = {}
        for comp in comps.values():
            result.update(self._simulate(tuple(sorted(comp))))
        for s in self.ctx.profiles:
            if s not in result:
                n = len(self.records[s])
                result[s] = ServiceStats(n, n, 0, 0.0, 0)
        return result


def summarize(stats: Mapping[str, ServiceStats]) -> tuple[float, float]:
    """(SLO attainment, mean normalized latency) over all services."""
    total = sum(v.requests for v in stats.values())
    met = sum(v.slo_met for v in stats.values())
    finished = sum(v.finished for v in stats.values())
    l_sum = sum(v.l_n_sum for v in stats.values())
    return (met / total if total else 1.0), (l_sum / finished if finished else 0.0)


def _can_allocate(g: Group, s: str, ctx: PlacementContext, replicas: Mapping[str, int]) -> bool:
    if s in g.services or len(g.services) >= ctx.share_cap:
        return False
    if ctx.max_replicas is not None and replicas[s] >= ctx.max_replicas:
        return False
    return ctx.fits(g.services + [s], g.size)


def allocate_services(groups: list[Group], ctx: PlacementContext,
                      evaluator: Evaluator) -> dict[str, ServiceStats]:
    """Fill ``groups`` in place; returns the stats of the final simulation.

    Each round simulates the current partial plan, then places the first
    (group, service) pair that passes the allocation check, scanning groups by
    ascending request rate and services by descending unserved index.  Services
    without a replica go first, so one that saw no requests still gets placed.
    """
    order = {s: i for i, s in enumerate(ctx.profiles)}
    replicas = {s: 0 for s in ctx.profiles}
    rates = {s: len(evaluator.records[s]) for s in ctx.profiles}
    while True:
        stats = evaluator.evaluate([(g.size, g.services) for g in groups])
        by_rate = sorted(range(len(groups)),
                         key=lambda i: (sum(rates[s] for s in groups[i].services), i))
        by_ui = sorted(ctx.profiles, key=lambda s: (replicas[s] > 0, -stats[s].unserved_index(ctx.alpha),
                                                   order[s]))
        found = None
        for i in by_rate:
            for s in by_ui:
                if _can_allocate(groups[i], s, ctx, replicas):
                    found = (i, s)
                    break
            if found:
                break
        if found is None:
            return stats
        i, s = found
        groups[i].services.append(s)
        replicas[s] += 1


def groups_to_plan(groups: Sequence[Group], gpus_per_node: int) -> PlacementPlan:
    return PlacementPlan([EngineSpec(g.gpu_ids(gpus_per_node), tuple(g.services))
                          for g in groups if g.services])


@dataclass
class CandidateResult:
    index: int
    tp: int
    plan: PlacementPlan
    slo_attainment: float
    l_n_mean: float
    unplaced: list[str] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not self.unplaced


@dataclass
class SearchResult:
    best: CandidateResult
    candidates: list[CandidateResult]
    simulations: int = 0

    @property
    def plan(self) -> PlacementPlan:
        return self.best.plan


def _evaluate_candidate(args) -> tuple[CandidateResult, int]:
    index, groups, ctx, history = args
    evaluator = Evaluator(ctx, history)
    groups = [replace(g, services=list(g.services)) for g in groups]
    stats = allocate_services(groups, ctx, evaluator)
    slo, l_n = summarize(stats)
    plan = groups_to_plan(groups, ctx.gpu.gpus_per_node)
    unplaced = sorted(set(ctx.profiles) - plan.services())
    tp = min(g.size for g in groups)
    return CandidateResult(index, tp, plan, slo, l_n, unplaced), evaluator.runs


def search_placement(ctx: PlacementContext, history: Trace, n_jobs: int = 1) -> SearchResult:
    """Best plan over all partitions by (SLO attainment, -mean normalized latency, index)."""
    partitions = enumerate_partitions(ctx)
    jobs = [(i, p, ctx, history) for i, p in enumerate(partitions)]
    if n_jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
            outcomes = list(pool.map(_evaluate_candidate, jobs))
    else:
        outcomes = [_evaluate_candidate(j) for j in jobs]
    candidates = [c for c, _ in outcomes]
    runs = sum(n for _, n in outcomes)
    feasible = [c for c in candidates if c.feasible]
    if not feasible:
        missing = sorted({s for c in candidates for s in c.unplaced})
        raise InfeasiblePlacement(f"no candidate places every service; unplaced: {missing}")
    best = min(feasible, key=lambda c: (-c.slo_attainment, c.l_n_mean, c.index))
    return SearchResult(best, candidates, runs)


def initial_plan(ctx: PlacementContext) -> PlacementPlan:
    """A dedicated minimum-size group per service, packed node by node."""
    engines = []
    m = ctx.gpu.gpus_per_node
    free = {n: 0 for n in range(ctx.gpu.num_nodes)}  # next free aligned GPU per node
    for s in ctx.profiles:
        size = ctx.min_group_size(s)
        for n in free:
            start = -(-free[n] // size) * size
            if start + size <= m:
                free[n] = start + size
                base = n * m + start
                engines.append(EngineSpec(tuple(range(base, base + size)), (s,)))
                break
        else:
            raise InfeasiblePlacement(f"not enough GPUs for a dedicated group for {s!r}")
    return PlacementPlan(engines)


def check_plan(plan: PlacementPlan, ctx: PlacementContext) -> list[str]:
    """Violations of coverage, disjointness, node locality, share cap, and memory."""
    errors = []
    m = ctx.gpu.gpus_per_node
    seen: set[int] = set()
    for i, e in enumerate(plan.engines):
        if len(e.services) > ctx.share_cap:
            errors.append(f"engine {i} hosts {len(e.services)} services")
        if len({g // m for g in e.gpus}) != 1:
            errors.append(f"engine {i} spans nodes")
        if e.tp > m or e.tp & (e.tp - 1):
            errors.append(f"engine {i} has invalid tp {e.tp}")
        if seen & set(e.gpus):
            errors.append(f"engine {i} reuses GPUs")
        seen |= set(e.gpus)
        if any(g >= ctx.gpu.total_gpus or g < 0 for g in e.gpus):
            errors.append(f"engine {i} uses GPUs outside the cluster")
        if not ctx.fits(list(e.services), e.tp):
            errors.append(f"engine {i} exceeds GPU memory")
    missing = set(ctx.profiles) - plan.services()
    if missing:
        errors.append(f"unplaced services: {sorted(missing)}")
    return errors
