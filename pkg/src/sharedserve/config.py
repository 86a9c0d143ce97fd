"""Experiment configuration: validation, defaults, and object builders.

A configuration is a YAML mapping with the sections ``cluster``, ``models``,
``services``, ``trace``, ``scheduler``, ``placement``, ``replacement``,
``metrics``, ``output`` and ``experiment``.  :func:`validate_config` returns a
fully populated copy; validating that copy again returns it unchanged.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Any, Mapping

import yaml

from .costmodel import GB, CostModel, GpuSpec, cost_model_from_dict, load_cost_model
from .errors import ConfigError
from .metrics import DEFAULT_DELTA, DEFAULT_SLO_SCALE
from .placement import DEFAULT_ALPHA, DEFAULT_MIN_KV_TOKENS, DEFAULT_SHARE_CAP, PlacementContext
from .replacement import METRICS, MODES, ReplacementConfig
from .scheduler import POLICIES
from .simcore import SimConfig
from .workload import (
    CHAT,
    CODE,
    SUMMARIZATION,
    ServiceProfile,
    Trace,
    generate_diurnal_trace,
    generate_trace,
    load_trace,
    profiles_from_dict,
    resolve_profiles,
)

PRESETS = {"chat": CHAT, "summarization": SUMMARIZATION, "code": CODE}
EXPERIMENTS = ("single", "rate_sweep", "policy_ablation", "density_ablation",
               "skewness_ablation", "noise_ablation")
VARIANTS = ("full", "fcfs", "mlfq", "no_placement", "fixed_interval")
TRACE_KINDS = ("poisson", "diurnal", "file")
PLACEMENT_MODES = ("search", "dedicated", "given")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "cluster": {"gpus_per_node": 8, "num_nodes": 1, "mem_gb": 80.0, "mem_utilization": 0.9},
    "models": {"file": None, "specs": [], "profiles": [], "synthesize_tp": [1, 2, 4, 8]},
    "services": [],
    "trace": {"kind": "poisson", "rate": 4.0, "rate_scale": 1.0, "duration": 300.0,
              "skewness": 1, "path": None, "period": 600.0, "amplitude": 0.8, "burst_amplitude": 0.5, "burst_period": None,
              "noise_scale": 0.0},
    "scheduler": {"policy": "db", "batch_cap": 32, "starvation_factor": 5.0,
                  "oracle_lengths": False, "fast_forward": True, "tokens_per_block": 16,
                  "mlfq_levels": 4, "mlfq_ratio": 2.0, "mlfq_base_quantum": None},
    "placement": {"mode": "search", "alpha": DEFAULT_ALPHA, "share_cap": DEFAULT_SHARE_CAP,
                  "max_replicas": None, "min_kv_tokens": DEFAULT_MIN_KV_TOKENS,
                  "history_duration": None, "n_jobs": 1, "plan": None},
    "replacement": {"mode": "off", "initial_interval": 600.0, "beta": 0.1, "i_min": 60.0,
                    "i_max": 3600.0, "metric": "l_n_mean", "migration_pause": 5.0},
    "metrics": {"slo_scale": DEFAULT_SLO_SCALE, "delta": DEFAULT_DELTA},
    "output": {"dir": "runs", "write_logs": True},
    "experiment": {"kind": "single", "rates": None, "policies": list(POLICIES),
                   "variants": list(VARIANTS), "densities": [0.5, 1.0, 2.0],
                   "skewness": [1, 2, 4, 8], "noise_scales": [0.0, 1.0, 4.0, 16.0]},
}

SERVICE_KEYS = {"service_id", "model_id", "input", "output", "preset", "scale",
                "mean_exec_time", "exec_time_stddev", "slo", "starvation_threshold"}


def _merge(defaults: Mapping, given: Mapping, path: str) -> dict:
    out = copy.deepcopy(dict(defaults))
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown key (expected one of {sorted(defaults)})",
                              key=f"{path}.{key}" if path else key)
        if isinstance(defaults[key], dict) and key not in ("plan",):
            if not isinstance(value, Mapping):
                raise ConfigError("expected a mapping", key=f"{path}.{key}" if path else key)
            out[key] = _merge(defaults[key], value, f"{path}.{key}" if path else key)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _num(cfg: Mapping, section: str, key: str, *, lo=None, hi=None, lo_open=False,
         hi_open=False, integer=False, optional=False):
    value = cfg[section][key]
    name = f"{section}.{key}"
    if value is None:
        if optional:
            return
        raise ConfigError("value required", key=name)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", key=name)
    if integer and int(value) != value:
        raise ConfigError("expected an integer", key=name)
    if not math.isfinite(value):
        raise ConfigError("must be finite", key=name)
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ConfigError(f"must be {'>' if lo_open else '>='} {lo}", key=name)
    if hi is not None and (value >= hi if hi_open else value > hi):
        raise ConfigError(f"must be {'<' if hi_open else '<='} {hi}", key=name)
    cfg[section][key] = int(value) if integer else value


def _choice(cfg: Mapping, section: str, key: str, options) -> None:
    if cfg[section][key] not in options:
        raise ConfigError(f"{cfg[section][key]!r} is not one of {{{', '.join(options)}}}",
                          key=f"{section}.{key}")


def _scaled(dist: Mapping, scale: float) -> dict:
    if "samples" in dist:
        return {"samples": [max(1, round(x * scale)) for x in dist["samples"]]}
    return {"mean": max(1.0, float(dist["mean"]) * scale),
            "stddev": float(dist.get("stddev", 0.0)) * scale}


def _normalize_services(rows, known_models: set[str]) -> list[dict]:
    if not isinstance(rows, list) or not rows:
        raise ConfigError("at least one service is required", key="services")
    out = []
    for i, raw in enumerate(rows):
        key = f"services[{i}]"
        if not isinstance(raw, Mapping):
            raise ConfigError("expected a mapping", key=key)
        unknown = set(raw) - SERVICE_KEYS
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", key=key)
        row = {k: copy.deepcopy(v) for k, v in raw.items() if k not in ("preset", "scale")}
        preset = raw.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r} (expected {sorted(PRESETS)})",
                                  key=f"{key}.preset")
            inp, outp = PRESETS[preset]
            row.setdefault("input", {"mean": inp.mean, "stddev": inp.stddev})
            row.setdefault("output", {"mean": outp.mean, "stddev": outp.stddev})
        scale = raw.get("scale", 1.0)
        if not isinstance(scale, (int, float)) or scale <= 0:
            raise ConfigError("must be > 0", key=f"{key}.scale")
        for part in ("input", "output"):
            if part not in row:
                raise ConfigError("missing length distribution", key=f"{key}.{part}")
            if isinstance(row[part], (int, float)):
                row[part] = {"mean": float(row[part]), "stddev": 0.0}
            if scale != 1.0:
                row[part] = _scaled(row[part], scale)
        if row.get("model_id") not in known_models:
            raise ConfigError(f"unknown model {row.get('model_id')!r}", key=f"{key}.model_id")
        out.append(row)
    profiles_from_dict(out)  # structural checks
    return out


def validate_config(raw: Mapping | None, base_dir: str | Path | None = None) -> dict:
    """Inject defaults, check ranges, and expand service presets.

    Relative ``models.file`` and ``trace.path`` entries are resolved against
    ``base_dir`` (normally the directory of the config file).
    """
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("configuration must be a mapping")
    cfg = _merge(DEFAULTS, raw, "")
    if base_dir is not None:
        for section, key in (("models", "file"), ("trace", "path")):
            value = cfg[section][key]
            if value and not Path(value).is_absolute():
                cfg[section][key] = str(Path(base_dir) / value)
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
        raise ConfigError("expected an integer", key="seed")

    for k in ("gpus_per_node", "num_nodes"):
        _num(cfg, "cluster", k, lo=1, integer=True)
    _num(cfg, "cluster", "mem_gb", lo=0, lo_open=True)
    _num(cfg, "cluster", "mem_utilization", lo=0, hi=1, lo_open=True)

    cm = build_cost_model(cfg)
    cfg["services"] = _normalize_services(cfg["services"], set(cm.models))

    tr = cfg["trace"]
    _choice(cfg, "trace", "kind", TRACE_KINDS)
    _num(cfg, "trace", "rate", lo=0, lo_open=True)
    _num(cfg, "trace", "rate_scale", lo=0, lo_open=True)
    _num(cfg, "trace", "duration", lo=0)
    _num(cfg, "trace", "skewness", lo=1, integer=True)
    _num(cfg, "trace", "period", lo=0, lo_open=True)
    _num(cfg, "trace", "amplitude", lo=0, hi=1, hi_open=True)
    _num(cfg, "trace", "burst_amplitude", lo=0, hi=1, hi_open=True)
    _num(cfg, "trace", "burst_period", lo=0, lo_open=True, optional=True)
    _num(cfg, "trace", "noise_scale", lo=0)
    if tr["kind"] == "file" and not tr["path"]:
        raise ConfigError("required when kind is 'file'", key="trace.path")

    _choice(cfg, "scheduler", "policy", POLICIES)
    _num(cfg, "scheduler", "batch_cap", lo=1, integer=True)
    _num(cfg, "scheduler", "starvation_factor", lo=0, lo_open=True)
    _num(cfg, "scheduler", "tokens_per_block", lo=1, integer=True)
    _num(cfg, "scheduler", "mlfq_levels", lo=1, integer=True)
    _num(cfg, "scheduler", "mlfq_ratio", lo=1)
    _num(cfg, "scheduler", "mlfq_base_quantum", lo=0, lo_open=True, optional=True)
    for k in ("oracle_lengths", "fast_forward"):
        if not isinstance(cfg["scheduler"][k], bool):
            raise ConfigError("expected true or false", key=f"scheduler.{k}")

    _choice(cfg, "placement", "mode", PLACEMENT_MODES)
    _num(cfg, "placement", "alpha", lo=0)
    _num(cfg, "placement", "share_cap", lo=1, integer=True)
    _num(cfg, "placement", "max_replicas", lo=1, integer=True, optional=True)
    _num(cfg, "placement", "min_kv_tokens", lo=0, integer=True)
    _num(cfg, "placement", "history_duration", lo=0, lo_open=True, optional=True)
    _num(cfg, "placement", "n_jobs", lo=1, integer=True)
    if cfg["placement"]["mode"] == "given" and not cfg["placement"]["plan"]:
        raise ConfigError("required when mode is 'given'", key="placement.plan")

    _choice(cfg, "replacement", "mode", MODES)
    _choice(cfg, "replacement", "metric", METRICS)
    _num(cfg, "replacement", "beta", lo=0, hi=1, lo_open=True, hi_open=True)
    for k in ("initial_interval", "i_min", "i_max"):
        _num(cfg, "replacement", k, lo=0, lo_open=True)
    _num(cfg, "replacement", "migration_pause", lo=0)
    rp = cfg["replacement"]
    if not rp["i_min"] <= rp["initial_interval"] <= rp["i_max"]:
        raise ConfigError("need i_min <= initial_interval <= i_max", key="replacement")

    _num(cfg, "metrics", "slo_scale", lo=0, lo_open=True)
    _num(cfg, "metrics", "delta", lo=0, hi=1)

    ex = cfg["experiment"]
    _choice(cfg, "experiment", "kind", EXPERIMENTS)
    if ex["rates"] is not None:
        ex["rates"] = _positive_list(ex["rates"], "experiment.rates")
    ex["densities"] = _positive_list(ex["densities"], "experiment.densities")
    ex["noise_scales"] = [float(x) for x in _list(ex["noise_scales"], "experiment.noise_scales")]
    if any(x < 0 for x in ex["noise_scales"]):
        raise ConfigError("must be >= 0", key="experiment.noise_scales")
    ex["skewness"] = [int(x) for x in _list(ex["skewness"], "experiment.skewness")]
    if any(x < 1 for x in ex["skewness"]):
        raise ConfigError("must be >= 1", key="experiment.skewness")
    for name, options in (("policies", POLICIES), ("variants", VARIANTS)):
        for v in _list(ex[name], f"experiment.{name}"):
            if v not in options:
                raise ConfigError(f"{v!r} is not one of {{{', '.join(options)}}}",
                                  key=f"experiment.{name}")
    return cfg


def _list(value, key: str) -> list:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError("expected a non-empty list", key=key)
    return list(value)


def _positive_list(value, key: str) -> list[float]:
    out = [float(x) for x in _list(value, key)]
    if any(x <= 0 for x in out):
        raise ConfigError("values must be > 0", key=key)
    return out


def load_config(path: str | Path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", key=str(path)) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", key=str(path)) from None
    return validate_config(raw, Path(path).parent)


# -- builders ------------------------------------------------------------------

def build_cluster(cfg: Mapping, density: float = 1.0) -> GpuSpec:
    """Cluster with ``1/density`` times the configured GPU count."""
    c = cfg["cluster"]
    gpn, nodes = c["gpus_per_node"], c["num_nodes"]
    if density != 1.0:
        total = gpn * nodes / density
        if total < 1 or abs(total - round(total)) > 1e-9:
            raise ConfigError(f"density {density} does not give a whole GPU count", key="cluster")
        total = int(round(total))
        if total <= gpn:
            gpn, nodes = total, 1
        elif total % gpn:
            raise ConfigError(f"{total} GPUs do not fill whole nodes of {gpn}", key="cluster")
        else:
            nodes = total // gpn
    return GpuSpec(c["mem_gb"] * GB, gpn, nodes, c["mem_utilization"])


def build_cost_model(cfg: Mapping) -> CostModel:
    m = cfg["models"]
    if m["file"]:
        return load_cost_model(m["file"])
    return cost_model_from_dict({"models": m["specs"], "profiles": m["profiles"],
                                 "synthesize_tp": m["synthesize_tp"]})


def build_profiles(cfg: Mapping, cm: CostModel) -> list[ServiceProfile]:
    return resolve_profiles(profiles_from_dict(cfg["services"]), cm,
                            slo_scale=cfg["metrics"]["slo_scale"],
                            starvation_factor=cfg["scheduler"]["starvation_factor"],
                            seed=cfg["seed"])


def build_trace(cfg: Mapping, profiles, seed: int, duration: float | None = None,
                rate: float | None = None, skewness: int | None = None) -> Trace:
    """Synthesize (or load) a trace.  ``rate`` is nominal; arrivals use ``rate * rate_scale``."""
    tr = cfg["trace"]
    duration = tr["duration"] if duration is None else duration
    rate = (tr["rate"] if rate is None else rate) * tr["rate_scale"]
    if tr["kind"] == "file":
        return load_trace(tr["path"])
    if tr["kind"] == "diurnal":
        return generate_diurnal_trace(profiles, rate, duration, tr["period"], tr["amplitude"],
                                      tr["burst_amplitude"], tr["burst_period"], seed)
    return generate_trace(profiles, rate, duration,
                          tr["skewness"] if skewness is None else skewness, seed)


def build_sim_config(cfg: Mapping, policy: str | None = None) -> SimConfig:
    s = cfg["scheduler"]
    return SimConfig(
        policy=policy or s["policy"],
        batch_cap=s["batch_cap"],
        tokens_per_block=s["tokens_per_block"],
        fast_forward=s["fast_forward"],
        oracle_lengths=s["oracle_lengths"],
        mlfq_levels=s["mlfq_levels"],
        mlfq_ratio=s["mlfq_ratio"],
        mlfq_base_quantum=s["mlfq_base_quantum"],
        migration_pause=cfg["replacement"]["migration_pause"],
    )


def build_placement_context(cfg: Mapping, cm: CostModel, profiles, gpu: GpuSpec,
                            sim_config: SimConfig) -> PlacementContext:
    p = cfg["placement"]
    return PlacementContext(cm, {q.service_id: q for q in profiles}, gpu, sim_config,
                            share_cap=p["share_cap"], alpha=p["alpha"],
                            max_replicas=p["max_replicas"], min_kv_tokens=p["min_kv_tokens"],
                            slo_scale=cfg["metrics"]["slo_scale"])


def build_replacement_config(cfg: Mapping, mode: str | None = None) -> ReplacementConfig:
    r = cfg["replacement"]
    return ReplacementConfig(mode=mode or r["mode"], initial_interval=r["initial_interval"],
                             beta=r["beta"], i_min=r["i_min"], i_max=r["i_max"],
                             metric=r["metric"], n_jobs=cfg["placement"]["n_jobs"])


def dump_config(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=False)
