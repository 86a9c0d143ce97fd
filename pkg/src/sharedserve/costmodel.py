"""Iteration-time and memory model for prefill and decode under tensor parallelism.

Times follow a linear model per ``(model_id, tp_size)`` entry::

    prefill = a_p + b_p * prompt_tokens
    decode  = a_d + b_d * batch_size + c_d * context_tokens

The built-in entries are synthesised from a small roofline-style formula
(compute-bound prefill, weight-bandwidth-bound decode, all-reduce latency that
grows with TP).  They are not measurements, but they keep the qualitative
trends that matter for placement: TP helps long prompts on larger models and
hurts short decode iterations on small ones.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .errors import ConfigError

GB = 1e9


@dataclass(frozen=True)
class GpuSpec:
    mem_bytes: float = 80 * GB
    gpus_per_node: int = 8
    num_nodes: int = 1
    # fraction of device memory the engine may use (weights + activations + KV)
    mem_utilization: float = 0.9

    def __post_init__(self):
        if self.mem_bytes <= 0 or self.gpus_per_node < 1 or self.num_nodes < 1:
            raise ConfigError("GPU spec fields must be >= 1", key="cluster")
        if not 0 < self.mem_utilization <= 1:
            raise ConfigError("mem_utilization must be in (0, 1]", key="cluster.mem_utilization")

    @property
    def total_gpus(self) -> int:
        return self.gpus_per_node * self.num_nodes

    @property
    def usable_bytes(self) -> float:
        return self.mem_bytes * self.mem_utilization


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    num_layers: int
    num_heads: int
    head_dim: int
    dtype_bytes: int
    weight_bytes: float
    min_tp: int = 1

    def __post_init__(self):
        for name in ("num_layers", "num_heads", "head_dim", "dtype_bytes", "min_tp"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=f"models.{self.model_id}.{name}")
        if self.weight_bytes <= 0:
            raise ConfigError("weight_bytes must be > 0", key=f"models.{self.model_id}.weight_bytes")

    @property
    def hidden_size(self) -> int:
        return self.num_heads * self.head_dim

    def kv_bytes_per_token(self, tp_size: int = 1) -> float:
        """Per-GPU key+value bytes for one token across all layers."""
        return 2 * self.num_layers * (self.num_heads // tp_size) * self.head_dim * self.dtype_bytes


@dataclass(frozen=True)
class CostEntry:
    a_p: float
    b_p: float
    a_d: float
    b_d: float
    c_d: float
    act_base_bytes: float = 0.0
    act_per_seq_bytes: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"cost coefficient {name} must be >= 0")
        if self.a_p + self.b_p <= 0 or self.a_d + self.b_d <= 0:
            raise ConfigError("iteration time must be positive for non-empty batches")


@dataclass
class CostModel:
    models: dict[str, ModelSpec]
    entries: dict[tuple[str, int], CostEntry] = field(default_factory=dict)

    def __post_init__(self):
        for (model_id, tp) in self.entries:
            if model_id not in self.models:
                raise ConfigError(f"cost entry for unknown model {model_id!r}", key="profiles")
            check_tp(self.models[model_id], tp)

    def model(self, model_id: str) -> ModelSpec:
        try:
            return self.models[model_id]
        except KeyError:
            raise ConfigError(f"unknown model {model_id!r}", key="models") from None

    def entry(self, model_id: str, tp_size: int) -> CostEntry:
        try:
            return self.entries[(model_id, tp_size)]
        except KeyError:
            raise ConfigError(
                f"no cost entry for model {model_id!r} at tp={tp_size}", key="profiles"
            ) from None

    def has_entry(self, model_id: str, tp_size: int) -> bool:
        return (model_id, tp_size) in self.entries

    def tp_sizes(self, model_id: str) -> list[int]:
        return sorted(tp for (m, tp) in self.entries if m == model_id)

    def prefill_time(self, model_id: str, tp_size: int, total_prompt_tokens: int) -> float:
        if total_prompt_tokens < 1:
            raise ValueError("prefill needs at least one prompt token")
        e = self.entry(model_id, tp_size)
        return e.a_p + e.b_p * total_prompt_tokens

    def decode_time(
        self, model_id: str, tp_size: int, batch_size: int, total_context_tokens: float
    ) -> float:
        e = self.entry(model_id, tp_size)
        if batch_size <= 0:
            return 0.0
        return e.a_d + e.b_d * batch_size + e.c_d * total_context_tokens

    def isolated_exec_time(
        self, model_id: str, tp_size: int, input_len: int, output_len: int
    ) -> float:
        """Wall time of one request served alone: one prefill, then ``output_len - 1`` decodes.

        Decode step ``g`` (``g`` tokens already generated) reads ``input_len + g``
        context tokens, so the decode sum has a closed form.
        """
        e = self.entry(model_id, tp_size)
        n = output_len - 1
        t = e.a_p + e.b_p * max(input_len, 1)
        if n > 0:
            t += n * (e.a_d + e.b_d + e.c_d * input_len) + e.c_d * n * (n + 1) / 2
        return t

    def activation_peak(self, model_id: str, tp_size: int, batch_size: int) -> float:
        e = self.entry(model_id, tp_size)
        return e.act_base_bytes + e.act_per_seq_bytes * batch_size

    def memory_footprint(
        self,
        model_ids: Iterable[str],
        tp_size: int,
        kv_pool_bytes: float = 0.0,
        batch_size: int = 1,
    ) -> float:
        """Per-GPU bytes for weights of every model, the largest activation peak, and KV."""
        model_ids = list(model_ids)
        weights = 0.0
        act = 0.0
        for mid in model_ids:
            spec = self.model(mid)
            check_tp(spec, tp_size)
            weights += spec.weight_bytes / tp_size
            act = max(act, self.activation_peak(mid, tp_size, batch_size))
        return weights + act + kv_pool_bytes / tp_size


def check_tp(spec: ModelSpec, tp_size: int) -> None:
    if tp_size < 1 or spec.num_heads % tp_size:
        raise ConfigError(
            f"tp_size={tp_size} does not divide num_heads={spec.num_heads}",
            key=f"models.{spec.model_id}",
        )


@dataclass(frozen=True)
class Hardware:
    """Inputs of the synthetic profile formula (A800-like defaults)."""

    peak_flops: float = 312e12
    prefill_mfu: float = 0.5
    decode_mfu: float = 0.3
    mem_bw: float = 2.0e12
    link_bw: float = 200e9
    allreduce_latency: float = 60e-6  # per all-reduce, multiplied by log2(tp)
    launch_overhead: float = 1e-3


def synthesize_entry(spec: ModelSpec, tp: int, hw: Hardware = Hardware()) -> CostEntry:
    params = spec.weight_bytes / spec.dtype_bytes
    flops_per_token = 2 * params
    n_allreduce = 2 * spec.num_layers
    ar_lat = hw.allreduce_latency * math.log2(tp) if tp > 1 else 0.0
    ring = 2 * (tp - 1) / tp
    comm_per_token = n_allreduce * spec.hidden_size * spec.dtype_bytes * ring / hw.link_bw
    return CostEntry(
        a_p=hw.launch_overhead + n_allreduce * ar_lat,
        b_p=flops_per_token / (tp * hw.peak_flops * hw.prefill_mfu) + comm_per_token,
        a_d=spec.weight_bytes / (tp * hw.mem_bw) + hw.launch_overhead + n_allreduce * ar_lat,
        b_d=flops_per_token / (tp * hw.peak_flops * hw.decode_mfu),
        c_d=spec.kv_bytes_per_token(tp) / hw.mem_bw,
        act_base_bytes=1.0 * GB / tp,
        act_per_seq_bytes=spec.hidden_size * spec.dtype_bytes * 4096 / tp,
    )


DEFAULT_MODELS = (
    ModelSpec("llama2-7b", 32, 32, 128, 2, 13.5 * GB, 1),
    ModelSpec("opt-6.7b", 32, 32, 128, 2, 13.4 * GB, 1),
    ModelSpec("llama2-13b", 40, 40, 128, 2, 26.0 * GB, 1),
    ModelSpec("llama2-70b", 80, 64, 128, 2, 138.0 * GB, 4),
)


def build_cost_model(
    models: Iterable[ModelSpec] = DEFAULT_MODELS,
    tp_sizes: Iterable[int] = (1, 2, 4, 8),
    hw: Hardware = Hardware(),
) -> CostModel:
    models = {m.model_id: m for m in models}
    entries = {}
    for spec in models.values():
        for tp in tp_sizes:
            if spec.num_heads % tp == 0:
                entries[(spec.model_id, tp)] = synthesize_entry(spec, tp, hw)
    return CostModel(models, entries)


def default_cost_model() -> CostModel:
    return build_cost_model()


def linear_cost_model(
    model_id: str = "toy",
    tp_sizes: Iterable[int] = (1,),
    *,
    a_p: float = 0.0,
    b_p: float = 0.0,
    a_d: float = 0.0,
    b_d: float = 0.0,
    c_d: float = 0.0,
    num_layers: int = 1,
    num_heads: int = 8,
    head_dim: int = 128,
    weight_bytes: float = 1 * GB,
) -> CostModel:
    """Hand-specified coefficients, identical at every TP size.  Mostly for tests."""
    spec = ModelSpec(model_id, num_layers, num_heads, head_dim, 2, weight_bytes, 1)
    entry = CostEntry(a_p, b_p, a_d, b_d, c_d)
    return CostModel({model_id: spec}, {(model_id, tp): entry for tp in tp_sizes})


def merge_cost_models(*cms: CostModel) -> CostModel:
    models, entries = {}, {}
    for cm in cms:
        models.update(cm.models)
        entries.update(cm.entries)
    return CostModel(models, entries)


def cost_model_from_dict(data: Mapping) -> CostModel:
    """Build from ``{"models": [...], "profiles": [...], "synthesize_tp": [...]}``.

    Models without explicit ``profiles`` rows get synthesised entries for every
    TP size in ``synthesize_tp`` that divides their head count.
    """
    models = {}
    for i, raw in enumerate(data.get("models", [])):
        try:
            spec = ModelSpec(
                model_id=str(raw["model_id"]),
                num_layers=int(raw["num_layers"]),
                num_heads=int(raw["num_heads"]),
                head_dim=int(raw.get("head_dim", 128)),
                dtype_bytes=int(raw.get("dtype_bytes", 2)),
                weight_bytes=float(raw["weight_bytes"]),
                min_tp=int(raw.get("min_tp", 1)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]}", key=f"models[{i}]") from None
        models[spec.model_id] = spec
    if not models:
        models = {m.model_id: m for m in DEFAULT_MODELS}
    entries = {}
    for i, raw in enumerate(data.get("profiles", [])):
        try:
            key = (str(raw["model_id"]), int(raw["tp"]))
            coeffs = {k: float(raw[k]) for k in ("a_p", "b_p", "a_d", "b_d", "c_d")}
        except KeyError as exc:
            raise ConfigError(f"missing field {exc.args[0]}", key=f"profiles[{i}]") from None
        coeffs["act_base_bytes"] = float(raw.get("act_base_bytes", 0.0))
        coeffs["act_per_seq_bytes"] = float(raw.get("act_per_seq_bytes", 0.0))
        entries[key] = CostEntry(**coeffs)
    tps = [int(t) for t in data.get("synthesize_tp", (1, 2, 4, 8))]
    for spec in models.values():
        if any(m == spec.model_id for m, _ in entries):
            continue
        for tp in tps:
            if spec.num_heads % tp == 0:
                entries[(spec.model_id, tp)] = synthesize_entry(spec, tp)
    return CostModel(models, entries)


def load_cost_model(path: str | Path) -> CostModel:
    with open(path, encoding="utf-8") as fh:
        return cost_model_from_dict(yaml.safe_load(fh) or {})


def cost_model_to_dict(cm: CostModel) -> dict:
    return {
        "models": [asdict(m) for m in cm.models.values()],
        "profiles": [
            {"model_id": m, "tp": tp, **asdict(e)} for (m, tp), e in sorted(cm.entries.items())
        ],
    }
