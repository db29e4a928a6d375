"""Shared model/hardware descriptions, seeds, and time units.

Every latency in the simulator is an integer number of nanoseconds; floats
appear only in user-facing configuration (seconds) and are converted once at
the boundary via :func:`seconds_to_ns`. Randomness always flows from a root
:class:`Seed` that is split into named sub-seeds, so two runs with the same
root seed are bit-identical regardless of module evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, List

import numpy as np

NS_PER_SEC = 1_000_000_000

GB = 1_000_000_000
MB = 1_000_000

#: Sustained host-to-device link bandwidth per accelerator, bytes/second.
BANDWIDTH_PRESETS: Dict[str, int] = {
    "h20": 128 * GB,
    "ascend_910b": 128 * GB,
    "a100": 64 * GB,
    "a6000": 64 * GB,
    "rtx_4090": 32 * GB,
    "arc_b580": 16 * GB,
    "rx_6500_xt": 8 * GB,
}

_SEED_SPACE = 2**64


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration input."""


def seconds_to_ns(seconds: float) -> int:
    """Convert a duration in seconds to integer nanoseconds (round half away)."""
    if seconds < 0:
        raise ValueError(f"negative duration: {seconds!r}")
    return round(seconds * NS_PER_SEC)


@dataclass(frozen=True)
class Seed:
    """Root of a deterministic seed tree.

    ``split`` derives an independent child seed from a label; equal
    (value, label) pairs always yield the same child, so modules can pull
    their own streams without coordinating global RNG state.
    """

    value: int

    def __post_init__(self) -> None:
        if not 0 <= self.value < _SEED_SPACE:
            raise ValueError(f"seed out of range [0, 2^64): {self.value}")

    def split(self, label: str) -> "Seed":
        digest = hashlib.sha256(
            self.value.to_bytes(8, "big") + b":" + label.encode("utf-8")
        ).digest()
        return Seed(int.from_bytes(digest[:8], "big"))

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.value)


@dataclass(frozen=True)
class ModelSpec:
    """Static description of a mixture-of-experts model."""

    num_layers: int
    experts_per_layer: int
    top_k: int
    expert_size_bytes: int
    embed_dim: int
    vocab_size: int


@dataclass(frozen=True)
class HardwareSpec:
    """Host link and device memory the simulation runs against."""

    link_bandwidth_bytes_per_sec: int
    device_memory_bytes: int
    layer_compute_time_sec: float


@dataclass(frozen=True, order=True)
class ExpertId:
    """A single expert parameter blob, addressed by (layer, expert)."""

    layer: int
    expert: int

    def __post_init__(self) -> None:
        if self.layer < 0 or self.expert < 0:
            raise ValueError(f"negative expert id: ({self.layer}, {self.expert})")

    @classmethod
    def of(cls, model: ModelSpec, layer: int, expert: int) -> "ExpertId":
        """Bounds-checked constructor against a model."""
        if not 0 <= layer < model.num_layers:
            raise ValueError(
                f"layer {layer} out of range [0, {model.num_layers})"
            )
        if not 0 <= expert < model.experts_per_layer:
            raise ValueError(
                f"expert {expert} out of range [0, {model.experts_per_layer})"
            )
        return cls(layer, expert)


@dataclass
class ValidationReport:
    violations: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(model: ModelSpec, hw: HardwareSpec) -> ValidationReport:
    """Check spec invariants; violations block a run, warnings do not."""
    report = ValidationReport()
    bad = report.violations.append

    if model.num_layers < 1:
        bad(f"num_layers must be >= 1, got {model.num_layers}")
    if model.experts_per_layer < 1:
        bad(f"experts_per_layer must be >= 1, got {model.experts_per_layer}")
    if not 1 <= model.top_k <= model.experts_per_layer:
        bad(
            f"top_k must lie in [1, experts_per_layer={model.experts_per_layer}],"
            f" got {model.top_k}"
        )
    if model.expert_size_bytes < 1:
        bad(f"expert_size_bytes must be >= 1, got {model.expert_size_bytes}")
    if model.embed_dim < 1:
        bad(f"embed_dim must be >= 1, got {model.embed_dim}")
    if model.vocab_size < 1:
        bad(f"vocab_size must be >= 1, got {model.vocab_size}")

    if hw.link_bandwidth_bytes_per_sec < 1:
        bad(
            "link_bandwidth_bytes_per_sec must be >= 1, got "
            f"{hw.link_bandwidth_bytes_per_sec}"
        )
    if hw.device_memory_bytes < model.expert_size_bytes:
        bad(
            f"device_memory_bytes {hw.device_memory_bytes} cannot hold one "
            f"expert of {model.expert_size_bytes} bytes"
        )
    if hw.layer_compute_time_sec <= 0:
        bad(
            f"layer_compute_time_sec must be > 0, got {hw.layer_compute_time_sec}"
        )

    if report.ok:
        working_set = (
            model.num_layers * model.top_k * model.expert_size_bytes
        )
        if hw.device_memory_bytes < working_set:
            report.warnings.append(
                f"device memory {hw.device_memory_bytes} B is below the "
                f"minimum full working set {working_set} B "
                f"(num_layers * top_k * expert_size_bytes); expect eviction"
            )
    return report


def _require_keys(section: str, data: Dict[str, Any], allowed: set, required: set) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown {section} key(s): {', '.join(unknown)}")
    missing = sorted(required - set(data))
    if missing:
        raise ConfigError(f"missing {section} key(s): {', '.join(missing)}")


def _require_int(section: str, key: str, value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    return value


def model_from_dict(data: Dict[str, Any]) -> ModelSpec:
    """Build a ModelSpec from a config mapping; unknown keys are errors."""
    fields = {
        "num_layers",
        "experts_per_layer",
        "top_k",
        "expert_size_bytes",
        "embed_dim",
        "vocab_size",
    }
    _require_keys("model", data, fields, fields)
    return ModelSpec(**{k: _require_int("model", k, data[k]) for k in fields})


def hardware_from_dict(data: Dict[str, Any]) -> HardwareSpec:
    """Build a HardwareSpec from a config mapping.

    Either ``link_bandwidth_bytes_per_sec`` or ``preset`` (a
    :data:`BANDWIDTH_PRESETS` name) supplies the link bandwidth.
    """
    allowed = {
        "preset",
        "link_bandwidth_bytes_per_sec",
        "device_memory_bytes",
        "layer_compute_time_sec",
    }
    _require_keys(
        "hardware", data, allowed, {"device_memory_bytes", "layer_compute_time_sec"}
    )
    if "preset" in data and "link_bandwidth_bytes_per_sec" in data:
        raise ConfigError(
            "hardware.preset and hardware.link_bandwidth_bytes_per_sec are exclusive"
        )
    if "preset" in data:
        name = data["preset"]
        if name not in BANDWIDTH_PRESETS:
            raise ConfigError(
                f"unknown hardware preset {name!r}; known: "
                + ", ".join(sorted(BANDWIDTH_PRESETS))
            )
        bandwidth = BANDWIDTH_PRESETS[name]
    elif "link_bandwidth_bytes_per_sec" in data:
        bandwidth = _require_int(
            "hardware", "link_bandwidth_bytes_per_sec",
            data["link_bandwidth_bytes_per_sec"],
        )
    else:
        raise ConfigError(
            "hardware needs either preset or link_bandwidth_bytes_per_sec"
        )
    compute = data["layer_compute_time_sec"]
    if isinstance(compute, bool) or not isinstance(compute, (int, float)):
        raise ConfigError(
            f"hardware.layer_compute_time_sec must be a number, got {compute!r}"
        )
    return HardwareSpec(
        link_bandwidth_bytes_per_sec=bandwidth,
        device_memory_bytes=_require_int(
            "hardware", "device_memory_bytes", data["device_memory_bytes"]
        ),
        layer_compute_time_sec=float(compute),
    )
