"""Placement plans: which GPUs form each engine and which services it hosts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .costmodel import CostModel, GpuSpec
from .errors import ConfigError
from .kvcache import DEFAULT_TOKENS_PER_BLOCK, pool_blocks_for_bytes
from .workload import ServiceProfile


@dataclass(frozen=True)
class EngineSpec:
    gpus: tuple[int, ...]
    services: tuple[str, ...]
    kv_blocks: int | None = None

    @property
    def tp(self) -> int:
        return len(self.gpus)

    def key(self) -> tuple:
        """Identity of the engine this spec describes: GPU set, service set, and KV pool."""
        return (tuple(sorted(self.gpus)), tuple(sorted(self.services)), self.kv_blocks)


@dataclass
class PlacementPlan:
    engines: list[EngineSpec] = field(default_factory=list)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PlacementPlan):
            return NotImplemented
        return self.signature() == other.signature()

    def signature(self) -> tuple:
        return tuple(sorted((e.gpus, tuple(sorted(e.services))) for e in self.engines))

    def services(self) -> set[str]:
        return {s for e in self.engines for s in e.services}

    def replicas(self, service_id: str) -> list[int]:
        return [i for i, e in enumerate(self.engines) if service_id in e.services]

    def to_dict(self) -> dict:
        return {"engines": [{"gpus": list(e.gpus), "tp": e.tp, "services": list(e.services),
                             "kv_blocks": e.kv_blocks} for e in self.engines]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "PlacementPlan":
        try:
            engines = [EngineSpec(tuple(int(g) for g in e["gpus"]), tuple(e["services"]),
                                  e.get("kv_blocks")) for e in data["engines"]]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed placement plan ({exc})", key="placement.plan") from None
        return cls(engines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PlacementPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def align_plan(new: PlacementPlan, old: PlacementPlan) -> PlacementPlan:
    """Relabel ``new``'s GPU groups so engines also present in ``old`` keep their GPUs.

    Groups of equal TP size are interchangeable slots, so an engine of ``new``
    whose TP size and services match an engine of ``old`` takes that engine's
    GPUs whenever ``new`` has a slot there.  The hosted services per slot are
    unchanged up to that permutation.
    """
    slots: dict[int, list[tuple[int, ...]]] = {}
    for e in new.engines:
        slots.setdefault(e.tp, []).append(e.gpus)
    previous: dict[tuple, list[tuple[int, ...]]] = {}
    for e in old.engines:
        previous.setdefault((e.tp, tuple(sorted(e.services)), e.kv_blocks), []).append(e.gpus)
    gpus: list[tuple[int, ...] | None] = []
    for e in new.engines:
        g = None
        for cand in previous.get((e.tp, tuple(sorted(e.services)), e.kv_blocks), []):
            if cand in slots[e.tp]:
                g = cand
                break
        if g is not None:
            slots[e.tp].remove(g)
            previous[(e.tp, tuple(sorted(e.services)), e.kv_blocks)].remove(g)
        gpus.append(g)
    engines = []
    for e, g in zip(new.engines, gpus):
        engines.append(EngineSpec(g if g is not None else slots[e.tp].pop(0), e.services,
                                  e.kv_blocks))
    return PlacementPlan(engines)


def free_kv_bytes(cm: CostModel, gpu: GpuSpec, model_ids: Sequence[str], tp: int,
                  batch_cap: int) -> float:
    """Per-GPU bytes left for KV after weights and the largest activation peak."""
    return gpu.usable_bytes - cm.memory_footprint(model_ids, tp, 0.0, batch_cap)


def engine_kv_blocks(cm: CostModel, gpu: GpuSpec, model_ids: Sequence[str], tp: int,
                     batch_cap: int, tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK) -> int:
    models = [cm.model(m) for m in dict.fromkeys(model_ids)]
    return pool_blocks_for_bytes(free_kv_bytes(cm, gpu, model_ids, tp, batch_cap),
                                 models, tokens_per_block, tp)


def validate_plan(plan: PlacementPlan, profiles: Mapping[str, ServiceProfile], gpu: GpuSpec) -> None:
    seen: set[int] = set()
    for e in plan.engines:
        if not e.gpus or not e.services:
            raise ConfigError("every engine needs GPUs and services", key="placement.plan")
        for g in e.gpus:
            if g in seen or not 0 <= g < gpu.total_gpus:
                raise ConfigError(f"GPU {g} reused or out of range", key="placement.plan")
            seen.add(g)
        for s in e.services:
            if s not in profiles:
                raise ConfigError(f"unknown service {s!r}", key="placement.plan")
    missing = set(profiles) - plan.services()
    if missing:
        raise ConfigError(f"services without an engine: {sorted(missing)}", key="placement.plan")
