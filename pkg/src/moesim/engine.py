"""Deterministic discrete-event simulation of MoE layer execution.

Time is integer nanoseconds. Each layer occupies exactly the configured
compute time, split across routing groups in proportion to token counts; a
group's share begins only once its experts are resident, and any gap is
charged to waiting latency. A single host link serves one transfer at a
time, demand misses before prefetches before evictions, FIFO within class.

Strategies:
  static          demand-load each layer's experts at layer start, no lookahead
  reactive        at every layer, prefetch predictions for the next layer
  fixed_interval  every ``interval`` layers, prefetch the next ``interval``
  adaptive        step size from compute_step at trace start, then stall and
                  overfetch counters move it; tier reassignment every layer

The ``oracle`` predictor consumes the trace's ground truth directly and
exists for calibration runs and tests; ``pregate`` resolves through the noisy
early router signal and ``forest`` through a trained activation model
anchored on that signal.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

from .core import (
    ExpertId,
    HardwareSpec,
    ModelSpec,
    Seed,
    seconds_to_ns,
    validate,
)
from .memory import (
    BandwidthEstimator,
    ExpertCache,
    Priority,
    TIER_HIGH,
    TransferQueue,
    TransferRequest,
)
from .predictor import ForestModel
from .scheduler import (
    MissStats,
    PredictionCache,
    PredictionQuery,
    StepState,
    compute_step,
    expected_expert_count,
    miss_rate,
    on_overfetch,
    on_stall,
    predict_experts,
    swap_in_latency,
)
from .workload import (
    ActivationTrace,
    EmbeddingTable,
    NoiseConfig,
    Sample,
    pregate_signal,
)

STRATEGIES = ("static", "reactive", "fixed_interval", "adaptive")
PREDICTORS = ("none", "pregate", "forest", "oracle")
COLD_START_MODES = ("counted", "preload")

#: Same-timestamp events order by this rank, then by emission sequence.
EVENT_RANK = {
    "transfer_start": 0,
    "transfer_end": 1,
    "prefetch_issue": 2,
    "stall": 3,
    "overfetch": 4,
    "layer_start": 5,
    "layer_end": 6,
}


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    kind: str
    seq: int
    detail: str

    @property
    def sort_key(self) -> Tuple[int, int, int]:
        return (self.time_ns, EVENT_RANK[self.kind], self.seq)


@dataclass(frozen=True)
class PolicyConfig:
    """One scheduling policy for a run; see the module docstring."""

    name: str
    strategy: str
    predictor: str = "none"
    interval: Optional[int] = None
    cache_aware_routing: bool = False
    cold_start: str = "counted"
    cum_threshold: float = 0.9
    stall_threshold: int = 3
    overfetch_threshold: int = 3
    min_step: int = 1
    max_step: Optional[int] = None
    recent_window: Optional[int] = None
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    prediction_cache_capacity: int = 4096

    def check(self, model: ModelSpec) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; known: {', '.join(STRATEGIES)}"
            )
        if self.predictor not in PREDICTORS:
            raise ValueError(
                f"unknown predictor {self.predictor!r}; known: {', '.join(PREDICTORS)}"
            )
        if self.strategy == "fixed_interval":
            if self.interval is None or self.interval < 1:
                raise ValueError("fixed_interval needs interval >= 1")
        if self.cold_start not in COLD_START_MODES:
            raise ValueError(
                f"unknown cold_start {self.cold_start!r}; known: "
                + ", ".join(COLD_START_MODES)
            )
        if self.strategy == "static" and self.predictor != "none":
            raise ValueError("static strategy takes no predictor")
        max_step = self.resolved_max_step(model)
        if not 1 <= self.min_step <= max_step:
            raise ValueError(
                f"bad step bounds [{self.min_step}, {max_step}]"
            )

    def resolved_max_step(self, model: ModelSpec) -> int:
        if self.max_step is not None:
            return self.max_step
        return max(1, model.num_layers - 1)


@dataclass(frozen=True)
class LayerRecord:
    layer: int
    start_ns: int
    end_ns: int
    stall_ns: int
    step: int
    predicted: Tuple[int, ...]
    actual: Tuple[int, ...]
    demand_misses: int


@dataclass
class SimMetrics:
    policy: str
    total_time_ns: int = 0
    compute_ns: int = 0
    waiting_ns: int = 0
    cache_miss_ns: int = 0
    prefetch_ns: int = 0
    cold_start_ns: int = 0
    hits: int = 0
    misses: int = 0
    admissions: int = 0
    evictions: int = 0
    stall_events: int = 0
    overfetch_events: int = 0
    prediction_cache_hits: int = 0
    prediction_cache_misses: int = 0
    bandwidth_estimate: float = 0.0
    final_step: int = 0
    miss_stats: MissStats = field(default_factory=MissStats)
    step_history: Tuple[Tuple[int, int], ...] = ()
    per_layer: Tuple[LayerRecord, ...] = ()
    samples: Tuple[Sample, ...] = ()
    events: Optional[Tuple[SimEvent, ...]] = None

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    @property
    def miss_rate(self) -> float:
        return miss_rate(self.miss_stats)


def route_batch(
    groups: Sequence[Tuple[int, Tuple[ExpertId, ...]]],
    resident: Set[ExpertId],
) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """Stable partition of group ids: fully resident groups run first.

    Returns (execution order, deferred group ids); relative order inside
    each class is preserved. The caller is responsible for requesting the
    deferred groups' missing experts at miss priority right away.
    """
    ready: List[int] = []
    deferred: List[int] = []
    for gid, demand in groups:
        if all(e in resident for e in demand):
            ready.append(gid)
        else:
            deferred.append(gid)
    return tuple(ready + deferred), tuple(deferred)


def _group_durations(total_ns: int, sizes: Sequence[int]) -> List[int]:
    """Split a layer's compute across groups by token count, exactly."""
    total_tokens = sum(sizes)
    durs = [total_ns * s // total_tokens for s in sizes]
    remainder = total_ns - sum(durs)
    for gid in range(remainder):
        durs[gid] += 1
    return durs


@dataclass
class _Horizon:
    first: int
    issue_ns: int
    missing: Set[ExpertId]
    last_arrival_ns: int
    checked: bool = False


@dataclass
class _InFlight:
    expert: ExpertId
    priority: Priority
    bucket: str
    start_ns: int
    end_ns: int


class _Sim:
    """Mutable state for one simulate() call."""

    def __init__(
        self,
        model: ModelSpec,
        hw: HardwareSpec,
        trace: ActivationTrace,
        policy: PolicyConfig,
        seed: Seed,
        forest: Optional[ForestModel],
        table: Optional[EmbeddingTable],
        emit_events: bool,
    ):
        self.model = model
        self.hw = hw
        self.trace = trace
        self.policy = policy
        self.seed = seed
        self.forest = forest
        self.table = table
        self.emit_events = emit_events

        self.layer_ns = seconds_to_ns(hw.layer_compute_time_sec)
        if self.layer_ns < 1:
            raise ValueError("layer compute time rounds below 1 ns")
        self.per_expert_ns = swap_in_latency(
            1, model.expert_size_bytes, hw.link_bandwidth_bytes_per_sec
        )
        self.cache = ExpertCache(
            hw.device_memory_bytes, model.expert_size_bytes,
            record_events=emit_events,
        )
        self.queue = TransferQueue()
        self.queued: Dict[ExpertId, TransferRequest] = {}
        self._buckets: Dict[int, str] = {}
        self.inflight: Optional[_InFlight] = None
        self.link_free_ns = 0
        self.estimator = BandwidthEstimator(
            initial=float(hw.link_bandwidth_bytes_per_sec)
        )
        self.pred_cache = PredictionCache(policy.prediction_cache_capacity)
        self.metrics = SimMetrics(policy=policy.name)
        self.events: List[SimEvent] = []
        self._event_seq = 0
        self.current_layer = 0
        self.clock = 0
        # predicted[l] = (ascending expert indices, step size at issue)
        self.predicted: Dict[int, Tuple[Tuple[int, ...], int]] = {}
        self.horizons: List[_Horizon] = []
        self.horizon_by_expert: Dict[ExpertId, _Horizon] = {}
        self.unconsumed: Dict[ExpertId, List[int]] = {}
        self.consumed_ns = 0
        self.state: Optional[StepState] = None
        self.next_boundary = 0
        self.samples: List[Sample] = []
        self.step_history: List[Tuple[int, int]] = []
        self.layer_records: List[LayerRecord] = []
        self._miss_guard = 0
        self._miss_guard_limit = 16 * model.num_layers * model.experts_per_layer + 256

    # ---- event plumbing ----

    def _emit(self, time_ns: int, kind: str, detail: str) -> None:
        if not self.emit_events:
            return
        self.events.append(SimEvent(time_ns, kind, self._event_seq, detail))
        self._event_seq += 1

    # ---- transfer machinery ----

    def _request(self, expert: ExpertId, priority: Priority, bucket: str) -> None:
        if expert in self.cache:
            return
        if self.inflight is not None and self.inflight.expert == expert:
            return
        existing = self.queued.get(expert)
        if existing is not None:
            if priority >= existing.priority:
                return
            # A queued prefetch that is now demanded jumps to miss priority;
            # the stale entry is skipped when popped.
        request = self.queue.enqueue(expert, priority)
        self.queued[expert] = request
        # Buckets classify transfer time for reporting only.
        self._buckets[request.seq] = bucket
        self._pump(self.clock)

    def _pump(self, now: int) -> None:
        while self.inflight is None:
            request = self.queue.next_transfer()
            if request is None:
                return
            if self.queued.get(request.expert) is not request:
                self._buckets.pop(request.seq, None)
                continue  # superseded entry
            del self.queued[request.expert]
            if request.expert in self.cache:
                self._buckets.pop(request.seq, None)
                continue  # arrived through an earlier transfer meanwhile
            start = max(now, self.link_free_ns)
            end = start + self.per_expert_ns
            self.inflight = _InFlight(
                expert=request.expert,
                priority=request.priority,
                bucket=self._buckets.pop(request.seq),
                start_ns=start,
                end_ns=end,
            )
            self._emit(
                start,
                "transfer_start",
                f"expert={request.expert.layer}:{request.expert.expert} "
                f"priority={request.priority.name.lower()}",
            )

    def _advance_to(self, t: int) -> None:
        """Complete every transfer ending at or before t."""
        while self.inflight is not None and self.inflight.end_ns <= t:
            tr = self.inflight
            self.inflight = None
            self.link_free_ns = tr.end_ns
            duration = tr.end_ns - tr.start_ns
            self.estimator.observe(self.model.expert_size_bytes, duration)
            self.cache.admit(tr.expert, TIER_HIGH, self.current_layer)
            self.unconsumed.setdefault(tr.expert, []).append(duration)
            if tr.bucket == "cold":
                self.metrics.cold_start_ns += duration
            elif tr.bucket == "miss":
                self.metrics.cache_miss_ns += duration
            else:
                self.metrics.prefetch_ns += duration
            horizon = self.horizon_by_expert.get(tr.expert)
            if horizon is not None and tr.expert in horizon.missing:
                horizon.missing.discard(tr.expert)
                horizon.last_arrival_ns = max(horizon.last_arrival_ns, tr.end_ns)
            self._emit(
                tr.end_ns,
                "transfer_end",
                f"expert={tr.expert.layer}:{tr.expert.expert}",
            )
            self._pump(tr.end_ns)

    def _wait_until_resident(self, required: Set[ExpertId], now: int) -> int:
        """Advance time until every required expert is resident."""
        while True:
            self._advance_to(now)
            missing = sorted(e for e in required if e not in self.cache)
            if not missing:
                return now
            bucket = "cold" if self.current_layer == 0 else "miss"
            for expert in missing:
                self._request(expert, Priority.MISS, bucket)
                self._miss_guard += 1
            if self._miss_guard > self._miss_guard_limit:
                raise RuntimeError(
                    "no forward progress: device memory too small to hold a "
                    "routing group's experts alongside in-flight prefetches"
                )
            if self.inflight is None:
                self._pump(now)
            assert self.inflight is not None, "missing experts but idle link"
            now = max(now, self.inflight.end_ns)

    def _consume(self, required: Set[ExpertId]) -> None:
        for expert in sorted(required):
            pending = self.unconsumed.get(expert)
            if pending:
                self.consumed_ns += pending.pop(0)

    # ---- prediction plumbing ----

    def _predict_targets(self, layer: int, step: int) -> List[Tuple[int, Tuple[int, ...]]]:
        """Resolve predictions for layers (layer, layer+step]."""
        last = layer + step
        assert last < self.model.num_layers
        if self.policy.predictor == "oracle":
            return [
                (t, self.trace.per_layer_actual[t]) for t in range(layer + 1, last + 1)
            ]
        router_probs = self.trace.per_layer_gate[layer].probs
        pregate = None
        if self.policy.predictor in ("pregate", "forest"):
            def pregate(h: int, _layer=layer):
                return pregate_signal(
                    self.trace, _layer, h, self.policy.noise, self.seed
                ).probs

        forest = self.forest if self.policy.predictor == "forest" else None
        known = {
            executed: self.trace.per_layer_actual[executed]
            for executed in range(0, layer + 1)
        }
        query = PredictionQuery(
            token_ids=self.trace.batch.token_ids,
            layer=layer,
            step=step,
            router_probs=router_probs,
            pregate=pregate,
            known_activations=known,
            cum_threshold=self.policy.cum_threshold,
        )
        result = predict_experts(
            query,
            self.pred_cache,
            forest=forest,
            table=self.table,
            model=self.model,
        )
        return [(t, experts) for t, experts in result]

    def _issue_horizon(self, layer: int, step: int) -> None:
        # Clip at the trace tail so the query, the stored step, and the
        # emitted samples agree on the horizon actually predicted.
        step = min(step, self.model.num_layers - 1 - layer)
        if step < 1:
            return
        targets = self._predict_targets(layer, step)
        if not targets:
            return
        horizon = _Horizon(
            first=targets[0][0],
            issue_ns=self.clock,
            missing=set(),
            last_arrival_ns=self.clock,
        )
        for target, experts in targets:
            self.predicted[target] = (tuple(experts), step)
            for e in experts:
                eid = ExpertId(target, e)
                if eid not in self.cache:
                    if eid not in self.queued and (
                        self.inflight is None or self.inflight.expert != eid
                    ):
                        self._request(eid, Priority.PREFETCH, "prefetch")
                    horizon.missing.add(eid)
                    self.horizon_by_expert[eid] = horizon
        self.horizons.append(horizon)
        self._emit(
            self.clock,
            "prefetch_issue",
            f"layer={layer} targets={targets[0][0]}..{targets[-1][0]} step={step}",
        )

    def _boundary(self, layer: int) -> None:
        policy = self.policy
        if policy.strategy == "static":
            return
        if policy.strategy == "reactive":
            self._issue_horizon(layer, 1)
        elif policy.strategy == "fixed_interval":
            assert policy.interval is not None
            if layer % policy.interval == 0:
                self._issue_horizon(layer, policy.interval)
        else:  # adaptive
            assert self.state is not None
            if layer == self.next_boundary:
                step = self.state.current
                self._issue_horizon(layer, step)
                self.next_boundary = layer + step

    def _check_overfetch(self, layer: int, first_exec_ns: int) -> None:
        for horizon in self.horizons:
            if horizon.first != layer or horizon.checked:
                continue
            horizon.checked = True
            if horizon.missing:
                continue  # never fully resident before first use
            margin = first_exec_ns - horizon.last_arrival_ns
            if margin > self.layer_ns:
                self.metrics.overfetch_events += 1
                self._emit(
                    first_exec_ns,
                    "overfetch",
                    f"layer={layer} margin_ns={margin}",
                )
                if self.state is not None:
                    self.state = on_overfetch(self.state)

    # ---- main loop ----

    def _preload(self) -> None:
        layer0 = [ExpertId(0, e) for e in self.trace.per_layer_actual[0]]
        if self.policy.cold_start == "preload":
            for eid in layer0:
                self.cache.admit(eid, TIER_HIGH, 0)
            self.metrics.cold_start_ns = swap_in_latency(
                len(layer0),
                self.model.expert_size_bytes,
                self.hw.link_bandwidth_bytes_per_sec,
            )

    def _step_in_effect(self) -> int:
        if self.policy.strategy == "adaptive":
            assert self.state is not None
            return self.state.current
        if self.policy.strategy == "fixed_interval":
            assert self.policy.interval is not None
            return self.policy.interval
        if self.policy.strategy == "reactive":
            return 1
        return 0

    def run(self) -> SimMetrics:
        model, policy = self.model, self.policy
        if policy.strategy == "adaptive":
            n_exp = expected_expert_count(
                self.trace.per_layer_gate[0], policy.cum_threshold
            )
            initial = compute_step(
                n_exp,
                model.expert_size_bytes,
                self.estimator.estimate,
                self.layer_ns,
                policy.min_step,
                policy.resolved_max_step(model),
            )
            self.state = StepState(
                current=initial,
                max_step=policy.resolved_max_step(model),
                min_step=policy.min_step,
                stall_threshold=policy.stall_threshold,
                overfetch_threshold=policy.overfetch_threshold,
            )
        self._preload()

        for layer in range(model.num_layers):
            self.current_layer = layer
            t0 = self.clock
            self._advance_to(t0)
            self._emit(t0, "layer_start", f"layer={layer}")
            self.step_history.append((layer, self._step_in_effect()))

            actual = self.trace.per_layer_actual[layer]
            required = [ExpertId(layer, e) for e in actual]
            missing: List[ExpertId] = []
            for eid in required:
                if not self.cache.access(eid, layer):
                    missing.append(eid)
            bucket = "cold" if layer == 0 else "miss"
            for eid in missing:
                self._request(eid, Priority.MISS, bucket)

            self._boundary(layer)

            if layer in self.predicted:
                experts, step = self.predicted[layer]
                self.metrics.miss_stats.observe(experts, actual)
                self.samples.append(
                    Sample(
                        token_ids=self.trace.batch.token_ids,
                        layer_idx=layer,
                        predicted_experts=experts,
                        actual_experts=actual,
                        step_size=step,
                    )
                )

            groups = [
                (gid, tuple(ExpertId(layer, e) for e in demand))
                for gid, demand in enumerate(self.trace.per_layer_group_actual[layer])
            ]
            if policy.cache_aware_routing:
                order, _deferred = route_batch(groups, self.cache.resident)
            else:
                order = tuple(gid for gid, _ in groups)
            durations = _group_durations(self.layer_ns, self.trace.group_sizes)

            chain = t0
            stall_total = 0
            for pos, gid in enumerate(order):
                demand = set(groups[gid][1])
                avail = self._wait_until_resident(demand, chain)
                if pos == 0:
                    self._check_overfetch(layer, avail)
                if avail > chain:
                    gap = avail - chain
                    stall_total += gap
                    self._emit(chain, "stall", f"layer={layer} gap_ns={gap}")
                    chain = avail
                self._consume(demand)
                chain += durations[gid]
                self._advance_to(chain)

            self.metrics.waiting_ns += stall_total
            self.metrics.compute_ns += self.layer_ns
            if stall_total > 0:
                self.metrics.stall_events += 1
                if self.state is not None:
                    self.state = on_stall(self.state)

            if policy.strategy == "adaptive":
                assert self.state is not None
                window = (
                    policy.recent_window
                    if policy.recent_window is not None
                    else self.state.current
                )
                predicted_next = {
                    ExpertId(t, e)
                    for t, (experts, _s) in self.predicted.items()
                    if t > layer
                    for e in experts
                }
                self.cache.reassign_tiers(predicted_next, window, layer)

            self._emit(chain, "layer_end", f"layer={layer}")
            self.layer_records.append(
                LayerRecord(
                    layer=layer,
                    start_ns=t0,
                    end_ns=chain,
                    stall_ns=stall_total,
                    step=self._step_in_effect(),
                    predicted=self.predicted.get(layer, ((), 0))[0],
                    actual=actual,
                    demand_misses=len(missing),
                )
            )
            self.clock = chain

        m = self.metrics
        m.total_time_ns = self.clock
        m.hits = self.cache.hits
        m.misses = self.cache.misses
        m.admissions = self.cache.admissions
        m.evictions = self.cache.evictions
        m.prediction_cache_hits = self.pred_cache.hits
        m.prediction_cache_misses = self.pred_cache.misses
        m.bandwidth_estimate = self.estimator.estimate
        m.final_step = self._step_in_effect()
        m.step_history = tuple(self.step_history)
        m.per_layer = tuple(self.layer_records)
        m.samples = tuple(self.samples)
        if self.emit_events:
            m.events = tuple(sorted(self.events, key=lambda e: e.sort_key))

        # Conservation: the timeline is compute plus recorded stall gaps.
        assert m.total_time_ns == m.compute_ns + m.waiting_ns, (
            m.total_time_ns,
            m.compute_ns,
            m.waiting_ns,
        )
        # Work conservation: consumed transfers ride a single serial link and
        # complete before their consuming group starts, so their total
        # duration is bounded by the wall clock.
        assert self.consumed_ns <= m.total_time_ns, (
            self.consumed_ns,
            m.total_time_ns,
        )
        return m


def simulate(
    model: ModelSpec,
    hw: HardwareSpec,
    trace: ActivationTrace,
    policy: PolicyConfig,
    seed: Seed,
    forest: Optional[ForestModel] = None,
    table: Optional[EmbeddingTable] = None,
    emit_events: bool = False,
) -> SimMetrics:
    """Run one policy over one trace; deterministic for equal arguments."""
    report = validate(model, hw)
    if not report.ok:
        raise ValueError("invalid specs: " + "; ".join(report.violations))
    policy.check(model)
    if trace.num_layers != model.num_layers:
        raise ValueError(
            f"trace has {trace.num_layers} layers, model {model.num_layers}"
        )
    if policy.predictor == "forest":
        if forest is None or table is None:
            raise ValueError("forest predictor needs a trained model and table")
    sim = _Sim(model, hw, trace, policy, seed, forest, table, emit_events)
    return sim.run()


@dataclass(frozen=True)
class RunRow:
    workload: int
    policy: str
    metrics: SimMetrics

    @property
    def stall_plus_miss_ns(self) -> int:
        return self.metrics.waiting_ns + self.metrics.cache_miss_ns


@dataclass
class ComparisonResult:
    """Per-(workload, policy) metrics with reductions against the baseline.

    The baseline is the first policy in the run order; reduction_pct maps
    (workload, policy) to the percentage drop in waiting + miss latency
    relative to that baseline, or None when the baseline latency is zero.
    """

    rows: List[RunRow]
    baseline: str
    reduction_pct: Dict[Tuple[int, str], Optional[float]]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(
            [
                "workload",
                "policy",
                "waiting_ns",
                "cache_miss_ns",
                "total_ns",
                "final_step",
                "hit_rate",
                "miss_rate",
                "reduction_pct",
            ]
        )
        for row in self.rows:
            reduction = self.reduction_pct[(row.workload, row.policy)]
            writer.writerow(
                [
                    row.workload,
                    row.policy,
                    row.metrics.waiting_ns,
                    row.metrics.cache_miss_ns,
                    row.metrics.total_time_ns,
                    row.metrics.final_step,
                    repr(row.metrics.hit_rate),
                    repr(row.metrics.miss_rate),
                    "" if reduction is None else repr(reduction),
                ]
            )
        return out.getvalue()


def run_comparison(
    model: ModelSpec,
    hw: HardwareSpec,
    traces: Sequence[ActivationTrace],
    policies: Sequence[PolicyConfig],
    seed: Seed,
    forest: Optional[ForestModel] = None,
    table: Optional[EmbeddingTable] = None,
    emit_events: bool = False,
) -> ComparisonResult:
    """Run every policy over every trace with paired noise seeds.

    All policies see identical traces and identical pre-gate noise (the seed
    is split per workload, not per policy), so differences are attributable
    to the policies alone.
    """
    if not policies:
        raise ValueError("no policies to compare")
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate policy names: {names}")
    rows: List[RunRow] = []
    for widx, trace in enumerate(traces):
        run_seed = seed.split(f"workload:{widx}")
        for policy in policies:
            metrics = simulate(
                model, hw, trace, policy, run_seed,
                forest=forest, table=table, emit_events=emit_events,
            )
            rows.append(RunRow(workload=widx, policy=policy.name, metrics=metrics))
    baseline = policies[0].name
    reductions: Dict[Tuple[int, str], Optional[float]] = {}
    for widx in range(len(traces)):
        base = next(
            r for r in rows if r.workload == widx and r.policy == baseline
        ).stall_plus_miss_ns
        for policy in policies:
            row = next(
                r for r in rows if r.workload == widx and r.policy == policy.name
            )
            if base > 0:
                reductions[(widx, policy.name)] = 100.0 * (
                    1.0 - row.stall_plus_miss_ns / base
                )
            else:
                reductions[(widx, policy.name)] = None
    return ComparisonResult(rows=rows, baseline=baseline, reduction_pct=reductions)


def metrics_csv(rows: Sequence[Tuple[int, SimMetrics]]) -> str:
    """CSV with one row per run: workload, policy, latency split, hit rate."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(
        [
            "workload",
            "policy",
            "waiting_ns",
            "cache_miss_ns",
            "cold_start_ns",
            "total_ns",
            "final_step",
            "hit_rate",
            "miss_rate",
        ]
    )
    for workload, metrics in rows:
        writer.writerow(
            [
                workload,
                metrics.policy,
                metrics.waiting_ns,
                metrics.cache_miss_ns,
                metrics.cold_start_ns,
                metrics.total_time_ns,
                metrics.final_step,
                repr(metrics.hit_rate),
                repr(metrics.miss_rate),
            ]
        )
    return out.getvalue()
