"""Adaptive step-size control and prediction resolution.

The step size S is the number of layers a prediction looks ahead. It is
computed once from the expected expert demand and the measured link
(ceil(N_e * E_s / (C_s * T_l)), clamped), then nudged by stall and overfetch
counters at runtime. Prediction requests resolve through a fixed ladder:
cached result, then forest scores, then the pre-gate signal, then plain
top-k of the current router output.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .core import NS_PER_SEC, ModelSpec
from .workload import GateDistribution

#: Absorbs float representation error in cumulative-probability prefix sums.
_CUM_EPS = 1e-9

#: An issued prediction: (target_layer, ascending expert tuple) per horizon layer.
HorizonPrediction = Tuple[Tuple[int, Tuple[int, ...]], ...]


def _as_probs(gate: Union[GateDistribution, np.ndarray]) -> np.ndarray:
    if isinstance(gate, GateDistribution):
        return gate.probs
    return np.asarray(gate, dtype=np.float64)


def expected_expert_count(
    gate: Union[GateDistribution, np.ndarray], cum_threshold: float = 0.9
) -> int:
    """Smallest count of highest-probability experts covering ``cum_threshold``.

    Ties are broken toward the lower expert index. The prefix comparison
    allows 1e-9 of slack so sums like 0.5 + 0.3 still count as reaching 0.8.
    """
    if not 0.0 < cum_threshold <= 1.0:
        raise ValueError(f"cum_threshold must lie in (0, 1], got {cum_threshold}")
    probs = _as_probs(gate)
    order = np.argsort(-probs, kind="stable")
    total = 0.0
    for count, idx in enumerate(order, start=1):
        total += float(probs[idx])
        if total >= cum_threshold - _CUM_EPS:
            return count
    return len(probs)


def top_experts(gate: Union[GateDistribution, np.ndarray], count: int) -> Tuple[int, ...]:
    """Ascending tuple of the ``count`` highest-probability experts."""
    probs = _as_probs(gate)
    order = np.argsort(-probs, kind="stable")
    return tuple(sorted(int(i) for i in order[:count]))


def swap_in_latency(
    num_experts: int, expert_size_bytes: int, bandwidth_bytes_per_sec: int
) -> int:
    """Exact transfer time in integer nanoseconds, rounded up."""
    if num_experts < 0:
        raise ValueError(f"num_experts must be >= 0, got {num_experts}")
    if bandwidth_bytes_per_sec < 1:
        raise ValueError(
            f"bandwidth must be >= 1 byte/s, got {bandwidth_bytes_per_sec}"
        )
    numer = num_experts * expert_size_bytes * NS_PER_SEC
    return -(-numer // bandwidth_bytes_per_sec)


def compute_step(
    num_experts: int,
    expert_size_bytes: int,
    bandwidth_bytes_per_sec: Union[int, float],
    layer_compute_ns: int,
    min_step: int,
    max_step: int,
) -> int:
    """Step size S = ceil(N_e * E_s / (C_s * T_l)), clamped to [min, max].

    Integer bandwidths use exact rational arithmetic; float bandwidths (an
    estimator's EWMA) go through math.ceil on the float quotient.
    """
    if layer_compute_ns < 1:
        raise ValueError(f"layer_compute_ns must be >= 1, got {layer_compute_ns}")
    if not 1 <= min_step <= max_step:
        raise ValueError(f"bad step bounds [{min_step}, {max_step}]")
    if num_experts < 0:
        raise ValueError(f"num_experts must be >= 0, got {num_experts}")
    numer = num_experts * expert_size_bytes * NS_PER_SEC
    if isinstance(bandwidth_bytes_per_sec, int):
        if bandwidth_bytes_per_sec < 1:
            raise ValueError("bandwidth must be >= 1 byte/s")
        raw = -(-numer // (bandwidth_bytes_per_sec * layer_compute_ns))
    else:
        if not bandwidth_bytes_per_sec > 0:
            raise ValueError("bandwidth must be positive")
        raw = math.ceil(numer / (bandwidth_bytes_per_sec * layer_compute_ns))
    return max(min_step, min(int(raw), max_step))


@dataclass(frozen=True)
class StepState:
    """Current step size plus the stall/overfetch feedback counters.

    Counters are global for a run and always strictly below their thresholds
    between events: reaching a threshold resets the counter and moves S one
    step within [min_step, max_step].
    """

    current: int
    max_step: int
    min_step: int = 1
    stall_count: int = 0
    overfetch_count: int = 0
    stall_threshold: int = 3
    overfetch_threshold: int = 3

    def __post_init__(self) -> None:
        if not 1 <= self.min_step <= self.max_step:
            raise ValueError(
                f"bad step bounds [{self.min_step}, {self.max_step}]"
            )
        if not self.min_step <= self.current <= self.max_step:
            raise ValueError(
                f"step {self.current} outside [{self.min_step}, {self.max_step}]"
            )
        if self.stall_threshold < 1 or self.overfetch_threshold < 1:
            raise ValueError("feedback thresholds must be >= 1")
        if not 0 <= self.stall_count < self.stall_threshold:
            raise ValueError(f"stall_count {self.stall_count} out of range")
        if not 0 <= self.overfetch_count < self.overfetch_threshold:
            raise ValueError(f"overfetch_count {self.overfetch_count} out of range")


def on_stall(state: StepState) -> StepState:
    """Record one stall; at the threshold, widen S by one and reset."""
    count = state.stall_count + 1
    if count >= state.stall_threshold:
        return replace(
            state,
            stall_count=0,
            current=min(state.current + 1, state.max_step),
        )
    return replace(state, stall_count=count)


def on_overfetch(state: StepState) -> StepState:
    """Record one overfetch; at the threshold, narrow S by one and reset."""
    count = state.overfetch_count + 1
    if count >= state.overfetch_threshold:
        return replace(
            state,
            overfetch_count=0,
            current=max(state.current - 1, state.min_step),
        )
    return replace(state, overfetch_count=count)


@dataclass
class MissStats:
    """Running prediction coverage: selected = predicted and actually used."""

    n_selected: int = 0
    n_total: int = 0

    def __post_init__(self) -> None:
        if self.n_selected < 0 or self.n_total < 0:
            raise ValueError("miss counts must be non-negative")
        if self.n_selected > self.n_total:
            raise ValueError(
                f"n_selected {self.n_selected} exceeds n_total {self.n_total}"
            )

    def observe(self, predicted: Sequence[int], actual: Sequence[int]) -> None:
        actual_set = set(actual)
        self.n_selected += len(actual_set & set(predicted))
        self.n_total += len(actual_set)


def miss_rate(stats: MissStats) -> float:
    """R_miss = 1 - N_selected / N_total; defined as 0 when nothing was needed."""
    if stats.n_total == 0:
        return 0.0
    return (stats.n_total - stats.n_selected) / stats.n_total


class PredictionCache:
    """LRU cache of resolved predictions keyed by (token_ids, layer, step)."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.hits = 0
        self.misses = 0
        self._entries: "OrderedDict[Tuple, HorizonPrediction]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: Tuple) -> Optional[HorizonPrediction]:
        entry = self._entries.get(key)
        if entry is None:
            self.misses += 1
            return None
        self._entries.move_to_end(key)
        self.hits += 1
        return entry

    def put(self, key: Tuple, value: HorizonPrediction) -> None:
        self._entries[key] = value
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)


@dataclass(frozen=True)
class PredictionQuery:
    """Everything predict_experts needs to resolve one horizon.

    pregate maps a horizon offset h in [1, step] to the (possibly corrupted)
    gate distribution of layer ``layer + h``; known_activations holds the
    multi-hot bits already established for layers below the horizon (actual
    bits for executed layers; predictions fill in as the horizon is walked).
    """

    token_ids: Tuple[int, ...]
    layer: int
    step: int
    router_probs: np.ndarray
    pregate: Optional[Callable[[int], np.ndarray]] = None
    known_activations: Optional[Dict[int, Tuple[int, ...]]] = None
    cum_threshold: float = 0.9


def cache_key(query: PredictionQuery) -> Tuple:
    return (query.token_ids, query.layer, query.step)


def predict_experts(
    query: PredictionQuery,
    cache: PredictionCache,
    forest=None,
    table=None,
    model: Optional[ModelSpec] = None,
) -> HorizonPrediction:
    """Resolve expert predictions for layers [layer+1, layer+step].

    Resolution order per target layer: a cached horizon short-circuits
    everything; otherwise forest scores anchored on the pre-gate baseline,
    then the pre-gate signal alone, then top-k of the current router output.
    The freshly resolved horizon is inserted into the cache.

    ``forest`` is any object with ``predict_scores(features, baseline)``;
    using one requires ``table`` and ``model`` for feature construction.
    """
    key = cache_key(query)
    cached = cache.get(key)
    if cached is not None:
        return cached

    per_layer: list = []
    prev_bits: Dict[int, Tuple[int, ...]] = dict(query.known_activations or {})
    for h in range(1, query.step + 1):
        target = query.layer + h
        pregate_probs = query.pregate(h) if query.pregate is not None else None
        if forest is not None:
            if table is None or model is None:
                raise ValueError("forest prediction needs table and model")
            from .predictor import inference_features

            feats = inference_features(
                model, table, query.token_ids, query.step, target, prev_bits
            )
            scores = forest.predict_scores(feats, baseline=pregate_probs)
            # The count rule runs on the corrected distribution itself.
            mass = np.clip(scores, 0.0, None)
            total = mass.sum()
            if total > 0:
                n_sel = expected_expert_count(
                    mass / total, query.cum_threshold
                )
            elif pregate_probs is not None:
                n_sel = expected_expert_count(pregate_probs, query.cum_threshold)
            else:
                n_sel = expected_expert_count(
                    query.router_probs, query.cum_threshold
                )
            experts = top_experts(scores, n_sel)
        elif pregate_probs is not None:
            n_sel = expected_expert_count(pregate_probs, query.cum_threshold)
            experts = top_experts(pregate_probs, n_sel)
        else:
            if model is None:
                raise ValueError("fallback prediction needs model for top_k")
            experts = top_experts(query.router_probs, model.top_k)
        per_layer.append((target, experts))
        prev_bits[target] = experts

    result: HorizonPrediction = tuple(per_layer)
    cache.put(key, result)
    return result
