"""Deterministic simulator and scheduling library for MoE expert offloading.

Everything here is pure Python plus numpy, fully seeded: same inputs, same
bytes out. The simulator models a single bandwidth-limited host link, a
two-tier LRU expert cache, and layer-synchronous compute, so scheduling
policies (static, reactive, fixed-interval, adaptive) can be compared on
identical workloads.
"""

from .core import (
    BANDWIDTH_PRESETS,
    GB,
    MB,
    NS_PER_SEC,
    ConfigError,
    ExpertId,
    HardwareSpec,
    ModelSpec,
    Seed,
    ValidationReport,
    hardware_from_dict,
    model_from_dict,
    seconds_to_ns,
    validate,
)
from .engine import (
    ComparisonResult,
    LayerRecord,
    PolicyConfig,
    RunRow,
    SimEvent,
    SimMetrics,
    metrics_csv,
    route_batch,
    run_comparison,
    simulate,
)
from .memory import (
    BandwidthEstimator,
    ExpertCache,
    Priority,
    TIER_HIGH,
    TIER_LOW,
    TransferQueue,
    TransferRequest,
    cache_events_csv,
)
from .predictor import (
    AccuracyReport,
    CurveComparison,
    DecayFit,
    ForestHyper,
    ForestModel,
    accuracy_report_csv,
    bit_accuracy,
    build_features,
    compare_curves,
    decay_value,
    feature_length,
    fit_decay,
    group_requests,
    inference_features,
    model_from_json,
    model_to_json,
    selection_bit_accuracy,
    train,
)
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
    top_experts,
)
from .workload import (
    ActivationTrace,
    EmbeddingTable,
    GateDistribution,
    LogParseError,
    NoiseConfig,
    Sample,
    TokenBatch,
    TraceGenConfig,
    build_embedding_table,
    default_group_radius,
    diversity_report_csv,
    format_log_line,
    generate_trace,
    mean_pool,
    noise_weight,
    parse_activation_log,
    pregate_signal,
    routing_groups,
    token_diversity,
)

__version__ = "0.1.0"

__all__ = [
    "AccuracyReport",
    "ActivationTrace",
    "BANDWIDTH_PRESETS",
    "BandwidthEstimator",
    "ComparisonResult",
    "ConfigError",
    "CurveComparison",
    "DecayFit",
    "EmbeddingTable",
    "ExpertCache",
    "ExpertId",
    "ForestHyper",
    "ForestModel",
    "GateDistribution",
    "GB",
    "HardwareSpec",
    "LayerRecord",
    "LogParseError",
    "MB",
    "MissStats",
    "ModelSpec",
    "NoiseConfig",
    "NS_PER_SEC",
    "PolicyConfig",
    "PredictionCache",
    "PredictionQuery",
    "Priority",
    "RunRow",
    "Sample",
    "Seed",
    "SimEvent",
    "SimMetrics",
    "StepState",
    "TIER_HIGH",
    "TIER_LOW",
    "TokenBatch",
    "TraceGenConfig",
    "TransferQueue",
    "TransferRequest",
    "ValidationReport",
    "accuracy_report_csv",
    "bit_accuracy",
    "build_embedding_table",
    "build_features",
    "cache_events_csv",
    "compare_curves",
    "compute_step",
    "decay_value",
    "default_group_radius",
    "diversity_report_csv",
    "expected_expert_count",
    "feature_length",
    "fit_decay",
    "format_log_line",
    "generate_trace",
    "group_requests",
    "hardware_from_dict",
    "inference_features",
    "mean_pool",
    "metrics_csv",
    "miss_rate",
    "model_from_dict",
    "model_from_json",
    "model_to_json",
    "noise_weight",
    "on_overfetch",
    "on_stall",
    "parse_activation_log",
    "predict_experts",
    "pregate_signal",
    "route_batch",
    "routing_groups",
    "run_comparison",
    "seconds_to_ns",
    "selection_bit_accuracy",
    "simulate",
    "swap_in_latency",
    "token_diversity",
    "top_experts",
    "train",
    "validate",
]
