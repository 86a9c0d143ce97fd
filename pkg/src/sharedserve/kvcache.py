"""Unified KV cache with merged blocks, plus a split-block reference.

Each model has a *native* block shape (tokens_per_block tokens across all of
its layers and per-GPU heads).  The merged pool uses blocks as large as the
largest native block among the shared models; a smaller model packs
``floor(merged / native)`` of its native blocks into one merged block and
addresses them with a second index.  A merged block holds native blocks of a
single model at a time and goes back to the free list when its last sub-slot
is released.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .costmodel import ModelSpec, check_tp
from .errors import CacheFull, SchedulerError

DEFAULT_TOKENS_PER_BLOCK = 16


def native_block_bytes(spec: ModelSpec, tokens_per_block: int, tp_size: int = 1) -> int:
    return tokens_per_block * spec.num_layers * 2 * (spec.num_heads // tp_size) \
        * spec.head_dim * spec.dtype_bytes


@dataclass(frozen=True)
class BlockShape:
    model_id: str
    tokens_per_block: int
    bytes_per_native_block: int

    @classmethod
    def of(cls, spec: ModelSpec, tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK,
           tp_size: int = 1) -> "BlockShape":
        check_tp(spec, tp_size)
        return cls(spec.model_id, tokens_per_block,
                   native_block_bytes(spec, tokens_per_block, tp_size))


def plan_merged_shape(models: Sequence[ModelSpec], tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK,
                      tp_size: int = 1) -> int:
    if not models:
        raise ValueError("need at least one model")
    return max(BlockShape.of(m, tokens_per_block, tp_size).bytes_per_native_block for m in models)


@dataclass
class CacheStats:
    block_table_entries: int = 0
    native_reads_writes: int = 0
    internal_fragmentation_bytes: int = 0
    peak_utilization: float = 0.0

    def to_dict(self) -> dict:
        return {
            "block_table_entries": self.block_table_entries,
            "native_reads_writes": self.native_reads_writes,
            "internal_fragmentation_bytes": self.internal_fragmentation_bytes,
            "peak_utilization": self.peak_utilization,
        }


class UnifiedKvCache:
    """Merged-block pool shared by every model of one engine."""

    def __init__(self, models: Sequence[ModelSpec], pool_blocks: int,
                 tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK, tp_size: int = 1):
        if pool_blocks < 0:
            raise ValueError("pool_blocks must be >= 0")
        self.tokens_per_block = tokens_per_block
        self.shapes = {m.model_id: BlockShape.of(m, tokens_per_block, tp_size) for m in models}
        self.merged_block_bytes = max(s.bytes_per_native_block for s in self.shapes.values())
        self.sub_slots = {mid: self.merged_block_bytes // s.bytes_per_native_block
                          for mid, s in self.shapes.items()}
        self.pool_size = pool_blocks
        # min-heaps: lowest block id / sub index is handed out first
        self._free = list(range(pool_blocks))
        self._block_model: dict[int, str] = {}
        self._block_used: dict[int, int] = {}
        # per model: merged block id -> heap of free sub indices
        self._partial: dict[str, dict[int, list[int]]] = {mid: {} for mid in self.shapes}
        self._partial_heap: dict[str, list[int]] = {mid: [] for mid in self.shapes}
        self._partial_free = {mid: 0 for mid in self.shapes}
        self.tables: dict[int, list[tuple[int, int]]] = {}
        self._req_model: dict[int, str] = {}
        self._req_tokens: dict[int, int] = {}
        self._rw = 0
        self._peak = 0

    # -- queries -------------------------------------------------------------
    @property
    def free_blocks(self) -> int:
        return len(self._free)

    @property
    def allocated_blocks(self) -> int:
        return self.pool_size - len(self._free)

    def capacity(self, model_id: str) -> int:
        """Native blocks of ``model_id`` that can still be allocated."""
        return self._partial_free[model_id] + len(self._free) * self.sub_slots[model_id]

    def total_native_capacity(self, model_id: str) -> int:
        return self.pool_size * self.sub_slots[model_id]

    def blocks_for(self, tokens: int) -> int:
        return -(-tokens // self.tokens_per_block)

    def held_blocks(self, req_id: int) -> int:
        return len(self.tables.get(req_id, ()))

    def held_tokens(self, req_id: int) -> int:
        return self._req_tokens.get(req_id, 0)

    def has(self, req_id: int) -> bool:
        return req_id in self.tables

    # -- mutation ------------------------------------------------------------
    def register(self, req_id: int, model_id: str) -> None:
        if model_id not in self.shapes:
            raise KeyError(f"model {model_id!r} is not served by this cache")
        if req_id in self.tables:
            raise SchedulerError(f"request {req_id} already registered")
        self.tables[req_id] = []
        self._req_model[req_id] = model_id
        self._req_tokens[req_id] = 0

    def allocate_blocks(self, req_id: int, model_id: str, tokens_needed: int) -> list[tuple[int, int]]:
        """Grow ``req_id`` by ``tokens_needed`` tokens; returns its block table.

        Raises :class:`CacheFull` (leaving the cache untouched) if the extra
        native blocks do not fit.
        """
        if req_id not in self.tables:
            self.register(req_id, model_id)
        elif self._req_model[req_id] != model_id:
            raise SchedulerError(f"request {req_id} belongs to {self._req_model[req_id]!r}")
        if tokens_needed < 0:
            raise ValueError("tokens_needed must be >= 0")
        table = self.tables[req_id]
        if tokens_needed == 0:
            return table
        total = self._req_tokens[req_id] + tokens_needed
        extra = self.blocks_for(total) - len(table)
        if extra > self.capacity(model_id):
            raise CacheFull(f"need {extra} native blocks of {model_id}, "
                            f"{self.capacity(model_id)} available")
        self._req_tokens[req_id] = total
        partial = self._partial[model_id]
        pheap = self._partial_heap[model_id]
        sub = self.sub_slots[model_id]
        for _ in range(extra):
            while pheap and pheap[0] not in partial:
                heapq.heappop(pheap)
            if pheap:
                bid = pheap[0]
                slots = partial[bid]
                idx = heapq.heappop(slots)
                if not slots:
                    del partial[bid]
                    heapq.heappop(pheap)
                self._partial_free[model_id] -= 1
            else:
                bid = heapq.heappop(self._free)
                self._block_model[bid] = model_id
                self._block_used[bid] = 0
                if sub > 1:
                    partial[bid] = list(range(1, sub))
                    heapq.heappush(pheap, bid)
                    self._partial_free[model_id] += sub - 1
                idx = 0
            self._block_used[bid] += 1
            table.append((bid, idx))
        self._rw += extra
        used = self.pool_size - len(self._free)
        if used > self._peak:
            self._peak = used
        return table

    def free_request(self, req_id: int) -> int:
        """Release every slot of ``req_id``; returns the number of native slots reclaimed."""
        try:
            table = self.tables.pop(req_id)
        except KeyError:
            raise SchedulerError(f"request {req_id} is not registered") from None
        model_id = self._req_model.pop(req_id)
        del self._req_tokens[req_id]
        self._release(model_id, table)
        return len(table)

    def shrink_to(self, req_id: int, tokens: int) -> int:
        """Keep only the slots covering ``tokens`` tokens; returns the slots released."""
        if req_id not in self.tables:
            raise SchedulerError(f"request {req_id} is not registered")
        if tokens > self._req_tokens[req_id]:
            raise ValueError("shrink_to cannot grow a request")
        table = self.tables[req_id]
        keep = self.blocks_for(tokens)
        tail = table[keep:]
        del table[keep:]
        self._req_tokens[req_id] = tokens
        self._release(self._req_model[req_id], tail)
        return len(tail)

    def _release(self, model_id: str, slots: Sequence[tuple[int, int]]) -> None:
        partial = self._partial[model_id]
        pheap = self._partial_heap[model_id]
        for bid, idx in slots:
            self._block_used[bid] -= 1
            if self._block_used[bid] == 0:
                if bid in partial:
                    self._partial_free[model_id] -= len(partial.pop(bid))
                del self._block_used[bid]
                del self._block_model[bid]
                heapq.heappush(self._free, bid)
            else:
                slots = partial.get(bid)
                if slots is None:
                    slots = partial[bid] = []
                    heapq.heappush(pheap, bid)
                heapq.heappush(slots, idx)
                self._partial_free[model_id] += 1

    # -- accounting ----------------------------------------------------------
    def check_invariants(self) -> None:
        owned: set[tuple[int, int]] = set()
        for req_id, table in self.tables.items():
            model_id = self._req_model[req_id]
            for bid, idx in table:
                if (bid, idx) in owned:
                    raise AssertionError(f"slot {(bid, idx)} owned twice")
                if idx >= self.sub_slots[model_id] or self._block_model.get(bid) != model_id:
                    raise AssertionError(f"bad slot {(bid, idx)} for {model_id}")
                owned.add((bid, idx))
        if len(self._free) + len(self._block_used) != self.pool_size:
            raise AssertionError("allocated + free != pool size")
        for bid, used in self._block_used.items():
            model_id = self._block_model[bid]
            free_here = len(self._partial[model_id].get(bid, ()))
            if used + free_here != self.sub_slots[model_id]:
                raise AssertionError(f"block {bid} sub-slot accounting broken")

    def stats(self) -> CacheStats:
        entries = sum(len(t) for t in self.tables.values())
        frag = 0
        for bid, used in self._block_used.items():
            native = self.shapes[self._block_model[bid]].bytes_per_native_block
            frag += self.merged_block_bytes - used * native
        for req_id, table in self.tables.items():
            shape = self.shapes[self._req_model[req_id]]
            slack = len(table) * self.tokens_per_block - self._req_tokens[req_id]
            frag += slack * shape.bytes_per_native_block // self.tokens_per_block
        peak = self._peak / self.pool_size if self.pool_size else 0.0
        return CacheStats(entries, self._rw, frag, peak)


class SplitKvCache:
    """Reference scheme: every native block is split into per-layer, per-head pieces."""

    def __init__(self, models: Sequence[ModelSpec], pool_pieces: int,
                 tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK, tp_size: int = 1):
        self.tokens_per_block = tokens_per_block
        self.models = {m.model_id: m for m in models}
        self.tp_size = tp_size
        self.piece_bytes = tokens_per_block * 2 * max(m.head_dim * m.dtype_bytes for m in models)
        self.pool_size = pool_pieces
        self.free = pool_pieces
        self.tables: dict[int, int] = {}
        self._tokens: dict[int, int] = {}
        self._model: dict[int, str] = {}
        self._rw = 0
        self._peak = 0

    def pieces_per_block(self, model_id: str) -> int:
        m = self.models[model_id]
        return m.num_layers * (m.num_heads // self.tp_size)

    def allocate_blocks(self, req_id: int, model_id: str, tokens_needed: int) -> int:
        tokens = self._tokens.get(req_id, 0) + tokens_needed
        have = self.tables.get(req_id, 0)
        need = -(-tokens // self.tokens_per_block) * self.pieces_per_block(model_id) - have
        if need > self.free:
            raise CacheFull(f"need {need} split pieces, {self.free} available")
        self.free -= need
        self.tables[req_id] = have + need
        self._tokens[req_id] = tokens
        self._model[req_id] = model_id
        self._rw += need
        self._peak = max(self._peak, self.pool_size - self.free)
        return self.tables[req_id]

    def free_request(self, req_id: int) -> int:
        n = self.tables.pop(req_id)
        self._tokens.pop(req_id)
        self._model.pop(req_id)
        self.free += n
        return n

    def stats(self) -> CacheStats:
        entries = sum(self.tables.values())
        frag = 0
        for req_id, pieces in self.tables.items():
            m = self.models[self._model[req_id]]
            per_block = self.pieces_per_block(m.model_id)
            slack_tokens = (pieces // per_block) * self.tokens_per_block - self._tokens[req_id]
            piece_bytes = self.tokens_per_block * 2 * m.head_dim * m.dtype_bytes
            frag += pieces * (self.piece_bytes - piece_bytes)
            frag += slack_tokens * per_block * 2 * m.head_dim * m.dtype_bytes
        peak = self._peak / self.pool_size if self.pool_size else 0.0
        return CacheStats(entries, self._rw, frag, peak)


def compare_schemes(
    models: Sequence[ModelSpec],
    workload_sample: Iterable[tuple[str, int]],
    tokens_per_block: int = DEFAULT_TOKENS_PER_BLOCK,
    tp_size: int = 1,
) -> tuple[CacheStats, CacheStats]:
    """Allocate every ``(model_id, tokens)`` request under both schemes and report stats.

    Both pools are sized to hold the whole sample so neither scheme hits
    ``CacheFull``.
    """
    sample = list(workload_sample)
    models = list(models)
    by_id = {m.model_id: m for m in models}
    native_total = sum(-(-tok // tokens_per_block) for _, tok in sample)
    merged = UnifiedKvCache(models, native_total, tokens_per_block, tp_size)
    pieces = sum(-(-tok // tokens_per_block) * by_id[mid].num_layers * (by_id[mid].num_heads // tp_size)
                 for mid, tok in sample)
    split = SplitKvCache(models, pieces, tokens_per_block, tp_size)
    for rid, (mid, tok) in enumerate(sample):
        merged.allocate_blocks(rid, mid, tok)
        split.allocate_blocks(rid, mid, tok)
    return merged.stats(), split.stats()


def pool_blocks_for_bytes(per_gpu_bytes: float, models: Sequence[ModelSpec],
                          tokens_per_block: int, tp_size: int) -> int:
    if per_gpu_bytes <= 0:
        return 0
    return int(math.floor(per_gpu_bytes / plan_merged_shape(models, tokens_per_block, tp_size)))
