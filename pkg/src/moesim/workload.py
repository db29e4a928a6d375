"""Synthetic workloads: token batches, gate distributions, activation traces.

Activation logs are line-delimited text, one record per line:

    token_ids=5,9;layer_idx=3;predicted_experts=1,2;actual_experts=2,7;step_size=2

Fields appear in exactly that order, separated by ``;``. List values are
comma-separated integers; an empty list is encoded as nothing after ``=``
(``predicted_experts=``). The parser reports 1-based line numbers and the
offending field on any malformed input.

Trace generation clusters the batch into routing groups by embedding
proximity, synthesizes one gate-score chain per group with a persistence
parameter coupling consecutive layers, and records the union of per-group
top-k selections as the layer's actual activation set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core import ModelSpec, Seed


@dataclass(frozen=True)
class EmbeddingTable:
    """Fixed random token embeddings, uniform on [-1, 1] per coordinate."""

    vectors: np.ndarray
    seed: Seed

    def __post_init__(self) -> None:
        self.vectors.setflags(write=False)


def build_embedding_table(model: ModelSpec, seed: Seed) -> EmbeddingTable:
    rng = seed.rng()
    vectors = rng.uniform(-1.0, 1.0, size=(model.vocab_size, model.embed_dim))
    return EmbeddingTable(vectors=vectors, seed=seed)


@dataclass(frozen=True)
class TokenBatch:
    """An ordered multiset of token ids; repeats are allowed."""

    token_ids: Tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.token_ids) < 1:
            raise ValueError("a batch holds at least one token")

    @classmethod
    def of(cls, model: ModelSpec, token_ids: Sequence[int]) -> "TokenBatch":
        """Bounds-checked constructor against a model's vocabulary."""
        for t in token_ids:
            if not 0 <= t < model.vocab_size:
                raise ValueError(
                    f"token id {t} out of range [0, {model.vocab_size})"
                )
        return cls(tuple(int(t) for t in token_ids))


@dataclass(frozen=True)
class GateDistribution:
    """Router output over one layer's experts: nonnegative, sums to one."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size < 1:
            raise ValueError("gate distribution must be a nonempty vector")
        if np.any(probs < 0):
            raise ValueError("gate distribution has negative entries")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"gate distribution sums to {total}, not 1")
        object.__setattr__(self, "probs", probs)
        probs.setflags(write=False)


def mean_pool(batch: TokenBatch, table: EmbeddingTable) -> np.ndarray:
    """Average embedding of the batch, e = (1/k) * sum of token vectors."""
    return table.vectors[list(batch.token_ids)].mean(axis=0)


def token_diversity(batch: TokenBatch, table: EmbeddingTable) -> float:
    """Sum of pairwise Euclidean distances between the batch's embeddings."""
    vecs = table.vectors[list(batch.token_ids)]
    total = 0.0
    for i in range(len(vecs)):
        diffs = vecs[i + 1 :] - vecs[i]
        if diffs.size:
            total += float(np.sqrt((diffs * diffs).sum(axis=1)).sum())
    return total


def default_group_radius(embed_dim: int) -> float:
    """Clustering radius scaled to the embedding cube's typical pair distance."""
    return 0.4 * math.sqrt(embed_dim)


def routing_groups(
    batch: TokenBatch, table: EmbeddingTable, radius: Optional[float] = None
) -> List[List[int]]:
    """Cluster batch positions by embedding proximity (leader-follower).

    A position joins the first existing group whose leader lies within
    ``radius``; otherwise it starts a new group. Deterministic, no RNG:
    identical tokens always share a group.
    """
    if radius is None:
        radius = default_group_radius(table.vectors.shape[1])
    vecs = table.vectors[list(batch.token_ids)]
    groups: List[List[int]] = []
    leaders: List[np.ndarray] = []
    for pos, vec in enumerate(vecs):
        for gid, leader in enumerate(leaders):
            if float(np.linalg.norm(vec - leader)) <= radius:
                groups[gid].append(pos)
                break
        else:
            groups.append([pos])
            leaders.append(vec)
    return groups


@dataclass(frozen=True)
class TraceGenConfig:
    """Knobs for synthetic trace generation.

    persistence: correlation of gate scores between consecutive layers,
        0 = independent layers, 1 = one frozen score vector per group.
    gate_concentration: gamma shape for raw scores; smaller concentrates
        mass on fewer experts.
    group_radius: embedding distance threshold for routing groups, or None
        for :func:`default_group_radius`.
    """

    persistence: float = 0.5
    gate_concentration: float = 0.3
    group_radius: Optional[float] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.persistence <= 1.0:
            raise ValueError(
                f"persistence must lie in [0, 1], got {self.persistence}"
            )
        if self.gate_concentration <= 0:
            raise ValueError(
                f"gate_concentration must be > 0, got {self.gate_concentration}"
            )


@dataclass(frozen=True)
class ActivationTrace:
    """Per-layer routing ground truth for one batch.

    ``per_layer_actual[l]`` is the deduplicated, ascending union of the
    routing groups' top-k selections at layer l; ``per_layer_group_actual``
    keeps the per-group selections (the engine's cache-aware routing needs
    group-level demand) and ``group_sizes`` the token count per group.
    """

    batch: TokenBatch
    per_layer_gate: Tuple[GateDistribution, ...]
    per_layer_actual: Tuple[Tuple[int, ...], ...]
    per_layer_group_actual: Tuple[Tuple[Tuple[int, ...], ...], ...]
    group_sizes: Tuple[int, ...]

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_gate)


def _top_k(probs: np.ndarray, k: int) -> Tuple[int, ...]:
    # Stable sort on the negated values: ties resolve to the lower index.
    order = np.argsort(-probs, kind="stable")
    return tuple(int(i) for i in order[:k])


def generate_trace(
    model: ModelSpec,
    table: EmbeddingTable,
    batch: TokenBatch,
    cfg: TraceGenConfig,
    seed: Seed,
) -> ActivationTrace:
    """Synthesize an activation trace for one batch.

    Each routing group carries its own gamma score chain
    s_l = rho * s_{l-1} + (1 - rho) * fresh, normalized to a gate per layer;
    the batch gate is the token-count-weighted mixture of group gates and the
    actual set is the union of per-group top-k selections.
    """
    rng = seed.rng()
    groups = routing_groups(batch, table, cfg.group_radius)
    m = model.experts_per_layer
    rho = cfg.persistence
    shape = cfg.gate_concentration

    scores = [rng.gamma(shape, 1.0, size=m) for _ in groups]
    weights = np.array([len(g) for g in groups], dtype=np.float64)
    weights /= weights.sum()

    gates: List[GateDistribution] = []
    actual: List[Tuple[int, ...]] = []
    group_actual: List[Tuple[Tuple[int, ...], ...]] = []
    for _layer in range(model.num_layers):
        layer_groups: List[Tuple[int, ...]] = []
        mixed = np.zeros(m, dtype=np.float64)
        for gid in range(len(groups)):
            probs = scores[gid] / scores[gid].sum()
            layer_groups.append(tuple(sorted(_top_k(probs, model.top_k))))
            mixed += weights[gid] * probs
        mixed /= mixed.sum()
        gates.append(GateDistribution(mixed))
        group_actual.append(tuple(layer_groups))
        actual.append(tuple(sorted(set().union(*layer_groups))))
        # Advance every chain, drawing unconditionally so the stream layout
        # does not depend on rho.
        scores = [
            rho * s + (1.0 - rho) * rng.gamma(shape, 1.0, size=m) for s in scores
        ]

    return ActivationTrace(
        batch=batch,
        per_layer_gate=tuple(gates),
        per_layer_actual=tuple(actual),
        per_layer_group_actual=tuple(group_actual),
        group_sizes=tuple(len(g) for g in groups),
    )


@dataclass(frozen=True)
class NoiseConfig:
    """Pre-gate corruption model.

    The mixing weight for a horizon of s layers is w(s) = 1 - exp(-decay_rate
    * s); math.inf is a valid rate and pins w = 1 for every horizon.
    """

    decay_rate: float = 0.6

    def __post_init__(self) -> None:
        if not self.decay_rate >= 0:
            raise ValueError(f"decay_rate must be >= 0, got {self.decay_rate}")


def noise_weight(noise: NoiseConfig, horizon: int) -> float:
    return 1.0 - math.exp(-noise.decay_rate * horizon)


def pregate_signal(
    trace: ActivationTrace,
    from_layer: int,
    horizon: int,
    noise: NoiseConfig,
    seed: Seed,
) -> GateDistribution:
    """Corrupted preview of the gate ``horizon`` layers ahead of ``from_layer``.

    With w = w(horizon), the returned distribution is
    (1 - w) * ((1 - w) * true + w * r) + w * uniform, where r is a seeded
    Dirichlet(1) draw. w = 0 returns the true target gate unchanged and
    w = 1 returns the uniform distribution; in between the random component
    degrades the top-k ranking more the further ahead the signal looks.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if not 0 <= from_layer < trace.num_layers:
        raise ValueError(
            f"from_layer {from_layer} out of range [0, {trace.num_layers})"
        )
    target = from_layer + horizon
    if target >= trace.num_layers:
        raise ValueError(
            f"horizon {horizon} from layer {from_layer} reaches layer "
            f"{target}, past the last layer {trace.num_layers - 1}"
        )
    true = trace.per_layer_gate[target].probs
    m = true.shape[0]
    w = noise_weight(noise, horizon)
    rng = seed.split(f"pregate:{from_layer}:{horizon}").rng()
    r = rng.dirichlet(np.ones(m))
    mixed = (1.0 - w) * ((1.0 - w) * true + w * r) + w * np.full(m, 1.0 / m)
    return GateDistribution(mixed)


@dataclass(frozen=True)
class Sample:
    """One activation-log record: what was predicted vs what ran.

    ``predicted_experts`` and ``actual_experts`` are ascending, duplicate-free
    tuples; ``step_size`` is the prediction horizon the record was made at.
    """

    token_ids: Tuple[int, ...]
    layer_idx: int
    predicted_experts: Tuple[int, ...]
    actual_experts: Tuple[int, ...]
    step_size: int

    def __post_init__(self) -> None:
        if len(self.token_ids) < 1:
            raise ValueError("sample needs at least one token id")
        if self.layer_idx < 0:
            raise ValueError(f"negative layer_idx: {self.layer_idx}")
        if self.step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {self.step_size}")


class LogParseError(ValueError):
    """Malformed activation-log input; message carries line and field."""


_LOG_FIELDS = (
    "token_ids",
    "layer_idx",
    "predicted_experts",
    "actual_experts",
    "step_size",
)


def format_log_line(sample: Sample) -> str:
    parts = (
        ",".join(str(t) for t in sample.token_ids),
        str(sample.layer_idx),
        ",".join(str(e) for e in sample.predicted_experts),
        ",".join(str(e) for e in sample.actual_experts),
        str(sample.step_size),
    )
    return ";".join(f"{k}={v}" for k, v in zip(_LOG_FIELDS, parts))


def _parse_int(raw: str, lineno: int, field: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise LogParseError(
            f"line {lineno}: field {field!r} has non-integer value {raw!r}"
        ) from None


def _parse_int_list(raw: str, lineno: int, field: str) -> Tuple[int, ...]:
    if raw == "":
        return ()
    return tuple(_parse_int(p, lineno, field) for p in raw.split(","))


def parse_activation_log(lines: Iterable[str], model: ModelSpec) -> List[Sample]:
    """Parse an activation log, validating bounds against ``model``.

    Raises :class:`LogParseError` naming the 1-based line number and field on
    any malformed line. Blank lines are skipped.
    """
    samples: List[Sample] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(";")
        if len(parts) != len(_LOG_FIELDS):
            raise LogParseError(
                f"line {lineno}: expected {len(_LOG_FIELDS)} fields, got {len(parts)}"
            )
        values = {}
        for part, expected in zip(parts, _LOG_FIELDS):
            key, sep, raw = part.partition("=")
            if not sep or key != expected:
                raise LogParseError(
                    f"line {lineno}: expected field {expected!r}, got {part!r}"
                )
            values[key] = raw

        token_ids = _parse_int_list(values["token_ids"], lineno, "token_ids")
        if not token_ids:
            raise LogParseError(f"line {lineno}: field 'token_ids' is empty")
        for t in token_ids:
            if not 0 <= t < model.vocab_size:
                raise LogParseError(
                    f"line {lineno}: field 'token_ids' has out-of-range id {t}"
                )

        layer_idx = _parse_int(values["layer_idx"], lineno, "layer_idx")
        if not 0 <= layer_idx < model.num_layers:
            raise LogParseError(
                f"line {lineno}: field 'layer_idx' out of range: {layer_idx}"
            )

        expert_lists = {}
        for field in ("predicted_experts", "actual_experts"):
            experts = _parse_int_list(values[field], lineno, field)
            for e in experts:
                if not 0 <= e < model.experts_per_layer:
                    raise LogParseError(
                        f"line {lineno}: field {field!r} has out-of-range expert {e}"
                    )
            if len(set(experts)) != len(experts):
                raise LogParseError(
                    f"line {lineno}: field {field!r} has duplicate experts"
                )
            expert_lists[field] = tuple(sorted(experts))
        if not expert_lists["actual_experts"]:
            raise LogParseError(
                f"line {lineno}: field 'actual_experts' is empty"
            )

        step_size = _parse_int(values["step_size"], lineno, "step_size")
        if step_size < 1:
            raise LogParseError(
                f"line {lineno}: field 'step_size' must be >= 1, got {step_size}"
            )
        samples.append(
            Sample(
                token_ids=token_ids,
                layer_idx=layer_idx,
                predicted_experts=expert_lists["predicted_experts"],
                actual_experts=expert_lists["actual_experts"],
                step_size=step_size,
            )
        )
    return samples


def diversity_report_csv(
    table: EmbeddingTable,
    batches: Sequence[TokenBatch],
    radius: Optional[float] = None,
) -> str:
    """CSV of per-batch diversity statistics (batch, tokens, groups, diversity)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["batch", "num_tokens", "num_groups", "diversity"])
    for idx, batch in enumerate(batches):
        writer.writerow(
            [
                idx,
                len(batch.token_ids),
                len(routing_groups(batch, table, radius)),
                repr(token_diversity(batch, table)),
            ]
        )
    return out.getvalue()
