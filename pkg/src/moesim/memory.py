"""Device-memory bookkeeping: two-tier expert cache, transfer queue, EWMA link estimate.

The cache tracks which expert blobs are resident and in which tier. The high
tier holds experts predicted for imminent activation or recently touched;
eviction drains the low tier first, least recently touched first, and falls
back to the high tier only when the low tier is empty. Logical time is the
count of layer-execution events, supplied by the caller; true recency order
is kept separately per touch so equal logical timestamps stay deterministic.
"""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum
from heapq import heappop, heappush
from itertools import count
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .core import NS_PER_SEC, ExpertId

TIER_HIGH = "high"
TIER_LOW = "low"


class ExpertCache:
    """Two-tier LRU over fixed-size expert blobs.

    capacity_bytes // expert_size_bytes slots; admitting into a full cache
    evicts from the low tier first (least recent first), then the high tier.
    A hit promotes the expert to the high tier as most recent.
    """

    def __init__(
        self,
        capacity_bytes: int,
        expert_size_bytes: int,
        record_events: bool = False,
    ):
        if expert_size_bytes < 1:
            raise ValueError(f"expert_size_bytes must be >= 1, got {expert_size_bytes}")
        self.capacity_experts = capacity_bytes // expert_size_bytes
        if self.capacity_experts < 1:
            raise ValueError(
                f"capacity {capacity_bytes} B cannot hold one expert of "
                f"{expert_size_bytes} B"
            )
        self.expert_size_bytes = expert_size_bytes
        self.hits = 0
        self.misses = 0
        self.admissions = 0
        self.evictions = 0
        self._orders: Dict[str, "OrderedDict[ExpertId, None]"] = {
            TIER_HIGH: OrderedDict(),
            TIER_LOW: OrderedDict(),
        }
        self._tier: Dict[ExpertId, str] = {}
        self._last_access: Dict[ExpertId, int] = {}
        self._touch: Dict[ExpertId, int] = {}
        self._touch_seq = count()
        self.events: Optional[List[Tuple[int, str, ExpertId]]] = (
            [] if record_events else None
        )

    def __contains__(self, expert: ExpertId) -> bool:
        return expert in self._tier

    def __len__(self) -> int:
        return len(self._tier)

    @property
    def resident(self) -> Set[ExpertId]:
        return set(self._tier)

    def tier_of(self, expert: ExpertId) -> Optional[str]:
        return self._tier.get(expert)

    def last_access(self, expert: ExpertId) -> Optional[int]:
        return self._last_access.get(expert)

    def _record(self, now: int, kind: str, expert: ExpertId) -> None:
        if self.events is not None:
            self.events.append((now, kind, expert))

    def _place(self, expert: ExpertId, tier: str) -> None:
        if expert in self._tier:
            del self._orders[self._tier[expert]][expert]
        self._tier[expert] = tier
        self._orders[tier][expert] = None
        self._touch[expert] = next(self._touch_seq)

    def access(self, expert: ExpertId, now: int) -> bool:
        """Touch an expert; a hit promotes it to the high tier, most recent."""
        if expert not in self._tier:
            self.misses += 1
            self._record(now, "miss", expert)
            return False
        self._place(expert, TIER_HIGH)
        self._last_access[expert] = now
        self.hits += 1
        self._record(now, "hit", expert)
        return True

    def admit(self, expert: ExpertId, tier: str, now: int) -> List[ExpertId]:
        """Insert an expert, evicting as needed; returns victims in order."""
        if tier not in self._orders:
            raise ValueError(f"unknown tier {tier!r}")
        if expert in self._tier:
            # Re-admission of a resident expert just refreshes placement.
            self._place(expert, tier)
            self._last_access[expert] = now
            return []
        evicted: List[ExpertId] = []
        while len(self._tier) >= self.capacity_experts:
            victim_order = self._orders[TIER_LOW] or self._orders[TIER_HIGH]
            victim = next(iter(victim_order))
            self._drop(victim)
            self.evictions += 1
            self._record(now, "evict", victim)
            evicted.append(victim)
        self._tier[expert] = tier
        self._orders[tier][expert] = None
        self._touch[expert] = next(self._touch_seq)
        self._last_access[expert] = now
        self.admissions += 1
        self._record(now, "admit", expert)
        return evicted

    def _drop(self, expert: ExpertId) -> None:
        tier = self._tier.pop(expert)
        del self._orders[tier][expert]
        del self._last_access[expert]
        del self._touch[expert]

    def reassign_tiers(
        self, predicted_next: Set[ExpertId], recent_window: int, now: int
    ) -> None:
        """Re-tier every resident expert.

        High tier: predicted for imminent activation or touched strictly
        within the last ``recent_window`` logical steps (window 0 keeps
        nothing on recency alone). Recency order within each tier is
        preserved from the existing touch order.
        """
        if recent_window < 0:
            raise ValueError(f"recent_window must be >= 0, got {recent_window}")
        by_recency = sorted(self._tier, key=lambda e: self._touch[e])
        for order in self._orders.values():
            order.clear()
        for expert in by_recency:
            recent = now - self._last_access[expert] < recent_window
            tier = TIER_HIGH if expert in predicted_next or recent else TIER_LOW
            self._tier[expert] = tier
            self._orders[tier][expert] = None


def cache_events_csv(events: Iterable[Tuple[int, str, ExpertId]]) -> str:
    """CSV encoding of a cache event trace (time, event, layer, expert)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["logical_time", "event", "layer", "expert"])
    for now, kind, expert in events:
        writer.writerow([now, kind, expert.layer, expert.expert])
    return out.getvalue()


class Priority(IntEnum):
    """Service classes on the host link; lower value is served first."""

    MISS = 0
    PREFETCH = 1
    EVICT = 2


@dataclass(frozen=True)
class TransferRequest:
    expert: ExpertId
    priority: Priority
    seq: int


class TransferQueue:
    """Priority queue over transfer requests, FIFO within each class."""

    def __init__(self) -> None:
        self._heap: List[Tuple[int, int, TransferRequest]] = []
        self._seq = count()

    def __len__(self) -> int:
        return len(self._heap)

    def enqueue(self, expert: ExpertId, priority: Priority) -> TransferRequest:
        request = TransferRequest(expert, priority, next(self._seq))
        heappush(self._heap, (int(priority), request.seq, request))
        return request

    def next_transfer(self) -> Optional[TransferRequest]:
        if not self._heap:
            return None
        return heappop(self._heap)[2]


class BandwidthEstimator:
    """EWMA of observed link throughput in bytes/second.

    The first observation sets the estimate directly; afterwards
    estimate <- alpha * observed + (1 - alpha) * estimate.
    """

    def __init__(self, initial: Optional[float] = None, alpha: float = 0.25):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.alpha = alpha
        self._estimate: Optional[float] = float(initial) if initial is not None else None
        self._observed = False

    @property
    def estimate(self) -> float:
        if self._estimate is None:
            raise RuntimeError("no estimate: no prior and nothing observed yet")
        return self._estimate

    def observe(self, transferred_bytes: int, elapsed_ns: int) -> float:
        if elapsed_ns < 1:
            raise ValueError(f"elapsed_ns must be >= 1, got {elapsed_ns}")
        if transferred_bytes < 0:
            raise ValueError("transferred_bytes must be >= 0")
        rate = transferred_bytes * NS_PER_SEC / elapsed_ns
        if not self._observed:
            self._estimate = rate
            self._observed = True
        else:
            self._estimate = self.alpha * rate + (1.0 - self.alpha) * self._estimate
        return self._estimate
