"""Experiment runner: config loading, runs, training, curve fits.

Exit codes: 0 success, 1 usage error, 2 config or validation error,
3 runtime error (I/O, no-progress simulation).

The config file is JSON:

    {
      "model": {"num_layers": 8, "experts_per_layer": 16, "top_k": 2,
                "expert_size_bytes": 10000000, "embed_dim": 8,
                "vocab_size": 256},
      "hardware": {"preset": "a100", "device_memory_bytes": 2000000000,
                   "layer_compute_time_sec": 0.005},
      "workload": {"num_traces": 2, "batch_size": 8, "persistence": 0.8,
                   "gate_concentration": 0.3},
      "policies": [
        {"name": "baseline", "strategy": "static"},
        {"name": "adaptive", "strategy": "adaptive", "predictor": "pregate",
         "cache_aware_routing": true}
      ],
      "seed": 7,
      "forest_model": "model.json"
    }

"hardware" takes either "preset" or "link_bandwidth_bytes_per_sec", not
both. "forest_model" is only read when some policy uses the forest
predictor. A "--seed" flag overrides the config seed; "--preset" overrides
the hardware preset.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .core import (
    BANDWIDTH_PRESETS,
    ConfigError,
    HardwareSpec,
    ModelSpec,
    Seed,
    hardware_from_dict,
    model_from_dict,
)
from .engine import PolicyConfig, RunRow, metrics_csv, run_comparison
from .predictor import (
    ForestHyper,
    ForestModel,
    accuracy_report_csv,
    bit_accuracy,
    build_features,
    compare_curves,
    fit_decay,
    group_requests,
    model_from_json,
    model_to_json,
    selection_bit_accuracy,
    train,
)
from .workload import (
    ActivationTrace,
    EmbeddingTable,
    LogParseError,
    NoiseConfig,
    Sample,
    TokenBatch,
    TraceGenConfig,
    build_embedding_table,
    format_log_line,
    generate_trace,
    parse_activation_log,
)

_POLICY_KEYS = {
    "name",
    "strategy",
    "predictor",
    "interval",
    "cache_aware_routing",
    "cold_start",
    "cum_threshold",
    "stall_threshold",
    "overfetch_threshold",
    "min_step",
    "max_step",
    "recent_window",
    "noise_decay_rate",
    "prediction_cache_capacity",
}

_WORKLOAD_KEYS = {
    "num_traces",
    "batch_size",
    "persistence",
    "gate_concentration",
    "group_radius",
}


@dataclass(frozen=True)
class WorkloadConfig:
    num_traces: int = 1
    batch_size: int = 4
    gen: TraceGenConfig = field(default_factory=TraceGenConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec
    hardware: HardwareSpec
    workload: WorkloadConfig
    policies: Tuple[PolicyConfig, ...]
    seed: Seed
    forest_model: Optional[str] = None


def policy_from_dict(data: Dict[str, Any]) -> PolicyConfig:
    unknown = set(data) - _POLICY_KEYS
    if unknown:
        raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
    for key in ("name", "strategy"):
        if key not in data:
            raise ConfigError(f"policy missing required key {key!r}")
    kwargs = {k: v for k, v in data.items() if k != "noise_decay_rate"}
    if "noise_decay_rate" in data:
        kwargs["noise"] = NoiseConfig(decay_rate=float(data["noise_decay_rate"]))
    return PolicyConfig(**kwargs)


def workload_from_dict(data: Dict[str, Any]) -> WorkloadConfig:
    unknown = set(data) - _WORKLOAD_KEYS
    if unknown:
        raise ConfigError(f"unknown workload keys: {sorted(unknown)}")
    num_traces = int(data.get("num_traces", 1))
    batch_size = int(data.get("batch_size", 4))
    if num_traces < 1:
        raise ConfigError(f"num_traces must be >= 1, got {num_traces}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    gen = TraceGenConfig(
        persistence=float(data.get("persistence", 0.5)),
        gate_concentration=float(data.get("gate_concentration", 0.3)),
        group_radius=(
            float(data["group_radius"]) if data.get("group_radius") is not None
            else None
        ),
    )
    return WorkloadConfig(num_traces=num_traces, batch_size=batch_size, gen=gen)


def load_experiment(path: str, seed_override: Optional[int] = None,
                    preset_override: Optional[str] = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = {"model", "hardware", "workload", "policies", "seed", "forest_model"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("model", "hardware", "policies"):
        if key not in data:
            raise ConfigError(f"config missing required key {key!r}")
    model = model_from_dict(data["model"])
    hw_data = dict(data["hardware"])
    if preset_override is not None:
        hw_data.pop("link_bandwidth_bytes_per_sec", None)
        hw_data["preset"] = preset_override
    hardware = hardware_from_dict(hw_data)
    if not isinstance(data["policies"], list) or not data["policies"]:
        raise ConfigError("config needs at least one policy")
    policies = tuple(policy_from_dict(p) for p in data["policies"])
    for policy in policies:
        policy.check(model)
    workload = workload_from_dict(data.get("workload", {}))
    seed_value = seed_override if seed_override is not None else data.get("seed", 0)
    forest_model = data.get("forest_model")
    if forest_model is not None and not isinstance(forest_model, str):
        raise ConfigError("forest_model must be a path string")
    return ExperimentConfig(
        model=model,
        hardware=hardware,
        workload=workload,
        policies=policies,
        seed=Seed(int(seed_value)),
        forest_model=forest_model,
    )


def build_traces(
    model: ModelSpec, workload: WorkloadConfig, seed: Seed
) -> List[ActivationTrace]:
    table = build_embedding_table(model, seed.split("embeddings"))
    traces = []
    for i in range(workload.num_traces):
        trace_seed = seed.split(f"trace:{i}")
        rng = trace_seed.split("tokens").rng()
        ids = tuple(
            int(t) for t in rng.integers(0, model.vocab_size, workload.batch_size)
        )
        batch = TokenBatch.of(model, ids)
        traces.append(generate_trace(model, table, batch, workload.gen, trace_seed))
    return traces


def _load_forest(cfg: ExperimentConfig) -> Tuple[Optional[ForestModel], Optional[EmbeddingTable]]:
    if not any(p.predictor == "forest" for p in cfg.policies):
        return None, None
    if cfg.forest_model is None:
        raise ConfigError("a forest policy needs the forest_model config key")
    with open(cfg.forest_model, "r", encoding="utf-8") as fh:
        forest = model_from_json(fh.read())
    if forest.embedding_seed is None:
        raise ConfigError(
            f"forest model {cfg.forest_model!r} carries no embedding seed"
        )
    table = build_embedding_table(cfg.model, Seed(forest.embedding_seed))
    return forest, table


def _fmt_ms(ns: int) -> str:
    return f"{ns / 1e6:.3f} ms"


def _summary_lines(cfg: ExperimentConfig, rows: Sequence[RunRow],
                   reductions: Dict[Tuple[int, str], Optional[float]],
                   baseline: str) -> List[str]:
    m, hw = cfg.model, cfg.hardware
    lines = [
        (
            f"model: {m.num_layers} layers x {m.experts_per_layer} experts, "
            f"top_k {m.top_k}, expert {m.expert_size_bytes / 1e6:.1f} MB"
        ),
        (
            f"hardware: {hw.link_bandwidth_bytes_per_sec / 1e9:.1f} GB/s link, "
            f"{hw.device_memory_bytes / 1e9:.2f} GB device memory, "
            f"{hw.layer_compute_time_sec * 1e3:.3f} ms/layer"
        ),
        (
            f"workload: {cfg.workload.num_traces} traces, "
            f"batch {cfg.workload.batch_size}, "
            f"persistence {cfg.workload.gen.persistence}"
        ),
    ]
    by_policy: Dict[str, List[RunRow]] = {}
    for row in rows:
        by_policy.setdefault(row.policy, []).append(row)
    for policy, policy_rows in by_policy.items():
        waiting = sum(r.metrics.waiting_ns for r in policy_rows)
        miss = sum(r.metrics.cache_miss_ns for r in policy_rows)
        total = sum(r.metrics.total_time_ns for r in policy_rows)
        line = (
            f"policy {policy}: waiting {_fmt_ms(waiting)}, "
            f"miss {_fmt_ms(miss)}, total {_fmt_ms(total)}"
        )
        if policy != baseline:
            base_rows = by_policy[baseline]
            base = sum(r.metrics.waiting_ns + r.metrics.cache_miss_ns
                       for r in base_rows)
            if base > 0:
                pct = 100.0 * (1.0 - (waiting + miss) / base)
                line += f", reduction {pct:.2f}% vs {baseline}"
        lines.append(line)
    return lines


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _dedupe_samples(rows: Sequence[RunRow]) -> List[Sample]:
    """Samples from all runs, one per (tokens, step, layer) request."""
    seen = set()
    out: List[Sample] = []
    for row in rows:
        for sample in row.metrics.samples:
            key = (sample.token_ids, sample.step_size, sample.layer_idx)
            if key in seen:
                continue
            seen.add(key)
            out.append(sample)
    return out


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_experiment(args.config, args.seed, args.preset)
    forest, table = _load_forest(cfg)
    traces = build_traces(cfg.model, cfg.workload, cfg.seed)
    result = run_comparison(
        cfg.model, cfg.hardware, traces, cfg.policies, cfg.seed,
        forest=forest, table=table, emit_events=args.emit_events,
    )
    out_dir = args.out_dir
    _write(
        os.path.join(out_dir, "metrics.csv"),
        metrics_csv([(r.workload, r.metrics) for r in result.rows]),
    )
    samples = _dedupe_samples(result.rows)
    if samples:
        log_text = "\n".join(format_log_line(s) for s in samples) + "\n"
        _write(os.path.join(out_dir, "activations.log"), log_text)
    if args.emit_events:
        _write(os.path.join(out_dir, "events.csv"), _events_csv(result.rows))
    summary = _summary_lines(
        cfg, result.rows, result.reduction_pct, result.baseline
    )
    _write(os.path.join(out_dir, "summary.txt"), "\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return 0


def _events_csv(rows: Sequence[RunRow]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["workload", "policy", "time_ns", "kind", "seq", "detail"])
    for row in rows:
        for event in row.metrics.events or ():
            writer.writerow(
                [row.workload, row.policy, event.time_ns, event.kind,
                 event.seq, event.detail]
            )
    return out.getvalue()


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = load_experiment(args.config, args.seed, args.preset)
    forest, table = _load_forest(cfg)
    traces = build_traces(cfg.model, cfg.workload, cfg.seed)
    result = run_comparison(
        cfg.model, cfg.hardware, traces, cfg.policies, cfg.seed,
        forest=forest, table=table,
    )
    _write(os.path.join(args.out_dir, "comparison.csv"), result.to_csv())
    for line in _summary_lines(
        cfg, result.rows, result.reduction_pct, result.baseline
    ):
        print(line)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_experiment(args.config, args.seed, args.preset)
    with open(args.log, "r", encoding="utf-8") as fh:
        samples = parse_activation_log(fh, cfg.model)
    groups = group_requests(samples)
    table_seed = cfg.seed.split("embeddings")
    table = build_embedding_table(cfg.model, table_seed)
    features, targets = build_features(groups, table, cfg.model)
    hyper = ForestHyper(
        num_trees=args.trees,
        max_depth=args.max_depth,
        min_samples_leaf=args.min_samples_leaf,
    )
    forest = train(features, targets, hyper, cfg.seed.split("forest"))
    forest = ForestModel(
        trees=forest.trees,
        hyper=forest.hyper,
        train_seed=forest.train_seed,
        feature_len=forest.feature_len,
        num_outputs=forest.num_outputs,
        embedding_seed=table_seed.value,
    )
    out_path = args.out or os.path.join(args.out_dir, "model.json")
    _write(out_path, model_to_json(forest))
    predictor_report = bit_accuracy(
        forest, features, targets, step_column=cfg.model.embed_dim
    )
    logged_report = selection_bit_accuracy(samples, cfg.model)
    report_csv = accuracy_report_csv(predictor_report, logged_report)
    _write(os.path.join(args.out_dir, "accuracy.csv"), report_csv)
    print(
        f"trained {hyper.num_trees} trees on {features.shape[0]} samples; "
        f"fit accuracy {predictor_report.overall:.4f}, "
        f"logged predictor {logged_report.overall:.4f}"
    )
    print(f"model written to {out_path}")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    with open(args.csv, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0] != "step_size":
            raise ConfigError(
                "fit input must be a CSV with a step_size column first"
            )
        columns: List[List[float]] = [[] for _ in header]
        for line in reader:
            if len(line) != len(header):
                raise ConfigError(
                    f"row has {len(line)} fields, header has {len(header)}"
                )
            for i, raw in enumerate(line):
                columns[i].append(float(raw))
    steps = columns[0]
    fits = {}
    lines = []
    for name, values in zip(header[1:], columns[1:]):
        fit = fit_decay(list(zip(steps, values)))
        fits[name] = fit
        lines.append(
            f"{name}: a={fit.a:.4f} b={fit.b:.4f} c={fit.c:.4f} rss={fit.rss:.6f}"
        )
    names = list(fits)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            cmp = compare_curves(fits[names[i]], fits[names[j]])
            lines.append(
                f"delta_inf({names[i]} - {names[j]}) = {cmp.delta_inf:.4f}"
            )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    print(text, end="")
    return 0


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="moesim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment JSON path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.add_argument("--preset", default=None,
                       choices=sorted(BANDWIDTH_PRESETS),
                       help="override the hardware bandwidth preset")

    p_sim = sub.add_parser("simulate", help="run policies, write metrics and logs")
    common(p_sim)
    p_sim.add_argument("--emit-events", action="store_true",
                       help="also write the event timeline CSV")
    p_sim.set_defaults(func=cmd_simulate)

    p_cmp = sub.add_parser("compare", help="paired policy comparison CSV")
    common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_train = sub.add_parser("train", help="train the activation model from a log")
    common(p_train)
    p_train.add_argument("--log", required=True, help="activation log path")
    p_train.add_argument("--out", default=None, help="model JSON output path")
    p_train.add_argument("--trees", type=int, default=50)
    p_train.add_argument("--max-depth", type=int, default=12)
    p_train.add_argument("--min-samples-leaf", type=int, default=2)
    p_train.set_defaults(func=cmd_train)

    p_fit = sub.add_parser("fit", help="fit decay curves to an accuracy CSV")
    p_fit.add_argument("--csv", required=True, help="accuracy CSV path")
    p_fit.add_argument("--out", default=None, help="optional report path")
    p_fit.set_defaults(func=cmd_fit)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, LogParseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
