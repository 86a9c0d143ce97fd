"""Command-line experiment runner.

    sharedserve --config scenario.yaml [--policy db] [--sweep-rate 2:50:8] ...

Each run writes ``runs/<label>/metrics.json`` and ``runs/<label>/run.log``
under the output directory; the experiment as a whole writes
``summary.csv`` and ``summary.json`` and prints a table.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from .errors import ConfigError, InfeasiblePlacement, TraceParseError, TraceValidationError
from .metrics import compute_metrics
from .placement import initial_plan, search_placement
from .plan import PlacementPlan, validate_plan
from .replacement import ReplacementController
from .simcore import Simulator
from .workload import perturb_output_lengths, profiles_with_observed_lengths

log = logging.getLogger("sharedserve")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3

SUMMARY_FIELDS = ("label", "variant", "policy", "rate", "density", "skewness", "noise_scale",
                  "requests", "unservable", "l_n_mean", "l_n_sum", "slo_attainment",
                  "p99_latency", "avg_ttft", "avg_tpot", "throughput", "replacements",
                  "plan_changes")


@dataclass(frozen=True)
class RunSpec:
    label: str
    variant: str = "full"
    policy: str = "db"
    rate: float = 1.0
    density: float = 1.0
    skewness: int = 1
    noise_scale: float = 0.0


def _fmt(x: float) -> str:
    return f"{x:g}"


def run_one(cfg: dict, spec: RunSpec, out_dir: Path | None = None) -> dict:
    """Simulate one configuration point; returns its summary row."""
    seed = cfg["seed"]
    gpu = C.build_cluster(cfg, spec.density)
    cm = C.build_cost_model(cfg)
    profiles = C.build_profiles(cfg, cm)
    truth = {p.service_id: p for p in profiles}
    trace = C.build_trace(cfg, profiles, seed, rate=spec.rate, skewness=spec.skewness)

    est_lens = None
    sched_profiles = profiles
    if spec.noise_scale > 0:
        est_lens = perturb_output_lengths(trace, spec.noise_scale, seed + 2)
        sched_profiles = profiles_with_observed_lengths(profiles, trace, est_lens, cm, seed)

    policy = {"fcfs": "fcfs", "mlfq": "mlfq"}.get(spec.variant, spec.policy)
    sim_cfg = C.build_sim_config(cfg, policy)
    ctx = C.build_placement_context(cfg, cm, sched_profiles, gpu, sim_cfg)

    mode = cfg["placement"]["mode"]
    repl_mode = cfg["replacement"]["mode"]
    if spec.variant == "no_placement":
        mode, repl_mode = "dedicated", "off"
    elif spec.variant == "fixed_interval" and repl_mode == "adaptive":
        repl_mode = "fixed"

    if mode == "given":
        plan = PlacementPlan.from_dict(cfg["placement"]["plan"])
        validate_plan(plan, truth, gpu)
    elif mode == "dedicated":
        plan = initial_plan(ctx)
    else:
        hist_duration = cfg["placement"]["history_duration"] or cfg["trace"]["duration"]
        history = C.build_trace(cfg, profiles, seed + 1, duration=hist_duration,
                                rate=spec.rate, skewness=spec.skewness)
        plan = search_placement(ctx, history, cfg["placement"]["n_jobs"]).plan if len(history) \
            else initial_plan(ctx)

    controller = None
    if repl_mode != "off":
        controller = ReplacementController(ctx, C.build_replacement_config(cfg, repl_mode))
    sim_cfg = replace(sim_cfg, record_log=cfg["output"]["write_logs"])
    sim = Simulator(cm, {p.service_id: p for p in sched_profiles}, plan, sim_cfg, gpu, controller)
    result = sim.run(trace, est_lens)
    report = compute_metrics(result.requests, truth, cm, cfg["metrics"]["slo_scale"],
                             cfg["metrics"]["delta"], result.kv_stats)

    rate = spec.rate
    if cfg["trace"]["kind"] == "file":
        span = trace.records[-1].arrival_time - trace.records[0].arrival_time if len(trace) else 0.0
        rate = len(trace) / span if span > 0 else 0.0
    row = {"label": spec.label, "variant": spec.variant, "policy": policy, "rate": rate,
           "density": spec.density, "skewness": spec.skewness, "noise_scale": spec.noise_scale,
           "requests": report.requests, "unservable": report.unservable,
           "l_n_mean": report.l_n_mean, "l_n_sum": report.l_n_sum,
           "slo_attainment": report.slo_attainment, "p99_latency": report.p99_latency,
           "avg_ttft": report.avg_ttft, "avg_tpot": report.avg_tpot,
           "throughput": report.throughput, "replacements": len(result.intervals),
           "plan_changes": len(result.plan_history) - 1}
    if out_dir is not None:
        run_dir = out_dir / "runs" / spec.label
        run_dir.mkdir(parents=True, exist_ok=True)
        payload = {"run": row, "metrics": report.to_dict(),
                   "plan": result.plan_history[-1][1].to_dict(),
                   "intervals": result.intervals,
                   "replacement_history": controller.state.history if controller else [],
                   "plan_history": [{"t": t, **p.to_dict()} for t, p in result.plan_history]}
        (run_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
        if cfg["output"]["write_logs"]:
            with open(run_dir / "run.log", "w", encoding="utf-8") as fh:
                for rec in result.log:
                    fh.write(json.dumps(rec) + "\n")
    return row


def plan_runs(cfg: dict, density: float = 1.0) -> list[RunSpec]:
    """Expand the ``experiment`` section into individual runs."""
    ex, tr = cfg["experiment"], cfg["trace"]
    base = RunSpec("", "full", cfg["scheduler"]["policy"], tr["rate"], density,
                   tr["skewness"], tr["noise_scale"])
    rates = ex["rates"] or [tr["rate"]]
    kind = ex["kind"]
    runs: list[RunSpec] = []
    if kind == "single":
        runs.append(replace(base, label=base.policy))
    elif kind == "rate_sweep":
        runs += [replace(base, label=f"{base.policy}_rate{_fmt(r)}", rate=r) for r in rates]
    elif kind == "policy_ablation":
        for r in rates:
            runs += [replace(base, label=f"{v}_rate{_fmt(r)}", variant=v, rate=r)
                     for v in ex["variants"]]
    elif kind == "density_ablation":
        for d in ex["densities"]:
            runs += [replace(base, label=f"{p}_density{_fmt(d)}", policy=p, density=d)
                     for p in ex["policies"]]
    elif kind == "skewness_ablation":
        for k in ex["skewness"]:
            runs += [replace(base, label=f"{p}_skew{k}", policy=p, skewness=k)
                     for p in ex["policies"]]
    elif kind == "noise_ablation":
        runs += [replace(base, label=f"{base.policy}_noise{_fmt(n)}", noise_scale=n)
                 for n in ex["noise_scales"]]
    return runs


def run_experiment(cfg: dict, out_dir: str | Path | None = None, density: float = 1.0) -> list[dict]:
    out = Path(out_dir if out_dir is not None else cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for spec in plan_runs(cfg, density):
        log.info("running %s", spec.label)
        rows.append(run_one(cfg, spec, out))
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    (out / "summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "config.yaml").write_text(C.dump_config(cfg))
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = ("label", "rate", "l_n_mean", "slo_attainment", "p99_latency", "avg_ttft",
            "throughput", "unservable")
    cells = [[c for c in cols]]
    for r in rows:
        cells.append([r[c] if isinstance(r[c], str) else f"{r[c]:.4g}" for c in cols])
    widths = [max(len(str(row[i])) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(str(v).ljust(w) for v, w in zip(row, widths)) for row in cells)


def parse_sweep(text: str) -> list[float]:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise ConfigError("expected lo:hi:n", key="--sweep-rate") from None
    if n < 1 or lo <= 0 or hi < lo:
        raise ConfigError("need 0 < lo <= hi and n >= 1", key="--sweep-rate")
    return [float(x) for x in np.linspace(lo, hi, n)]


def apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    raw = dict(raw or {})

    def section(name):
        raw[name] = dict(raw.get(name) or {})
        return raw[name]

    if args.policy:
        section("scheduler")["policy"] = args.policy
    if args.oracle_lengths:
        section("scheduler")["oracle_lengths"] = True
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.skewness is not None:
        section("trace")["skewness"] = args.skewness
    if args.noise_scale is not None:
        section("trace")["noise_scale"] = args.noise_scale
    if args.sweep_rate:
        ex = section("experiment")
        ex["rates"] = parse_sweep(args.sweep_rate)
        if ex.get("kind", "single") == "single":
            ex["kind"] = "rate_sweep"
    return raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharedserve", description=__doc__.split("\n")[0])
    p.add_argument("--config", required=True, help="YAML experiment file")
    p.add_argument("--policy", choices=("db", "fcfs", "rr", "mlfq"))
    p.add_argument("--seed", type=int)
    p.add_argument("--sweep-rate", metavar="LO:HI:N", help="linearly spaced request rates")
    p.add_argument("--density", type=float, default=1.0,
                   help="cluster density; the GPU count is divided by this")
    p.add_argument("--skewness", type=int, help="consecutive requests per service")
    p.add_argument("--noise-scale", type=float, help="profiling noise, in multiples of output length")
    p.add_argument("--out-dir", help="output directory (default: output.dir of the config)")
    p.add_argument("--oracle-lengths", action="store_true",
                   help="give the scheduler true output lengths")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        import yaml

        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", key=args.config) from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", key=args.config) from None
        if args.density <= 0:
            raise ConfigError("must be > 0", key="--density")
        cfg = C.validate_config(apply_overrides(raw, args), Path(args.config).parent)
        rows = run_experiment(cfg, args.out_dir, args.density)
    except (ConfigError, TraceParseError, TraceValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasiblePlacement as exc:
        print(f"infeasible placement: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(format_table(rows))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
