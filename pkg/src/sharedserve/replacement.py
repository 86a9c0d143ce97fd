"""Periodic re-placement with an interval that adapts to estimation error."""

from __future__ import annotations

from dataclasses import dataclass, field

from .metrics import interval_metric
from .placement import Evaluator, PlacementContext, search_placement, summarize
from .plan import align_plan
from .simcore import ReplacementDecision, Simulator

MODES = ("adaptive", "fixed", "off")
METRICS = ("l_n_mean", "slo_attainment")


def update_interval(interval: float, m_real: float, m_est: float, beta: float,
                    i_min: float | None = None, i_max: float | None = None) -> float:
    """Shrink by ``1 - beta`` when the relative estimation error reaches ``beta``, else grow by ``1 + beta``.

    An estimate of zero counts as maximal error.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if interval <= 0:
        raise ValueError("interval must be > 0")
    shrink = m_est == 0 or abs(m_real - m_est) / abs(m_est) >= beta
    new = interval * ((1 - beta) if shrink else (1 + beta))
    if i_min is not None:
        new = max(new, i_min)
    if i_max is not None:
        new = min(new, i_max)
    return new


@dataclass
class ReplacementConfig:
    mode: str = "adaptive"
    initial_interval: float = 600.0
    beta: float = 0.1
    i_min: float = 60.0
    i_max: float = 3600.0
    metric: str = "l_n_mean"
    n_jobs: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if not 0 < self.i_min <= self.initial_interval <= self.i_max:
            raise ValueError("need 0 < i_min <= initial_interval <= i_max")


@dataclass
class ReplacementState:
    interval: float
    last_time: float = 0.0
    m_est: float | None = None
    m_real: float | None = None
    grows: int = 0
    shrinks: int = 0
    history: list[dict] = field(default_factory=list)


class ReplacementController:
    """Simulator hook: at each interval end, compare estimate with reality and re-search placement.

    The searched plan replaces the current one only if it scores strictly
    better on the interval that just ended; a migration pause is not worth a
    tie.  The estimate for the coming interval is the kept plan's simulated
    metric on that interval.
    """

    def __init__(self, ctx: PlacementContext, config: ReplacementConfig | None = None):
        self.ctx = ctx
        self.config = config or ReplacementConfig()
        self.state = ReplacementState(self.config.initial_interval)

    def start(self, sim: Simulator) -> float | None:
        self.state = ReplacementState(self.config.initial_interval)
        if self.config.mode == "off":
            return None
        return self.config.initial_interval

    def on_interval_end(self, sim: Simulator, now: float) -> ReplacementDecision:
        cfg, st = self.config, self.state
        done = sim.completed_between(st.last_time, now)
        old = st.interval
        m_real = None
        if done:
            m_real = interval_metric(done, self.ctx.profiles, cfg.metric,
                                     self.ctx.cost_model, self.ctx.slo_scale)
        if cfg.mode == "adaptive" and st.m_est is not None and m_real is not None:
            st.interval = update_interval(old, m_real, st.m_est, cfg.beta, cfg.i_min, cfg.i_max)
            if st.interval > old:
                st.grows += 1
            elif st.interval < old:
                st.shrinks += 1
        window = sim.trace_window(st.last_time, now)
        plan, m_est = None, None
        if len(window):
            best = search_placement(self.ctx, window, cfg.n_jobs).best
            current = summarize(Evaluator(self.ctx, window).evaluate(
                [(e.tp, e.services) for e in sim.plan.engines]))
            slo, l_n = current
            if (-best.slo_attainment, best.l_n_mean) < (-slo, l_n):
                plan, slo, l_n = align_plan(best.plan, sim.plan), best.slo_attainment, best.l_n_mean
            m_est = l_n if cfg.metric == "l_n_mean" else slo
        detail = {"old_interval": old, "new_interval": st.interval, "m_real": m_real,
                  "m_est": st.m_est}
        st.history.append({"t": now, **detail})
        st.m_real = m_real
        st.m_est = m_est
        st.last_time = now
        return ReplacementDecision(plan, now + st.interval, detail)
