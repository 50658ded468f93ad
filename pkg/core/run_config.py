"""Run Configuration — Deterministic preset layer.

Defines the parameter groups every command is driven by and the two named
presets they are drawn from:

  - full: the full-scale setting (65536-slot pool, 256 top clusters)
  - desk:  the same algorithm sized for a workstation (4096-slot pool,
           64 top clusters)

Resolution order is preset defaults < config file < CLI flags; the result is
a flat ``schemas.RunConfig`` which hands out the frozen groups below.
"""

import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional

from schemas import CenterMode, MetricKind, RunConfig


# ---------------------------------------------------------------------------
# Parameter groups (frozen, validated at construction)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class HierarchyConfig:
    """Shape of the hierarchical graph structure."""

    layers: int = 2
    clusters_per_node: int = 256     # top-layer cluster count
    sub_clusters: int = 16           # per-parent cluster count below the top
    kmeans_iters: int = 5
    neighbors: int = 8               # σ, neighbours per centre in every graph
    metric: MetricKind = MetricKind.cosine
    leaf_size_threshold: Optional[int] = None   # None -> 2σ+1
    center_mode: CenterMode = CenterMode.mean
    epsilon: Optional[float] = None
    floyd_block: int = 64

    def __post_init__(self) -> None:
        for name in ("layers", "clusters_per_node", "sub_clusters", "neighbors", "floyd_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kmeans_iters < 0:
            raise ValueError(f"kmeans_iters must be >= 0, got {self.kmeans_iters}")
        if self.leaf_size_threshold is not None and self.leaf_size_threshold < 1:
            raise ValueError("leaf_size_threshold must be >= 1")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def leaf_threshold(self) -> int:
        if self.leaf_size_threshold is not None:
            return self.leaf_size_threshold
        return 2 * self.neighbors + 1

    def flat(self, node_count: int) -> "HierarchyConfig":
        """Single-layer variant with one centre per point (warm-up mode)."""
        return HierarchyConfig(
            layers=1,
            clusters_per_node=max(1, node_count),
            sub_clusters=self.sub_clusters,
            kmeans_iters=self.kmeans_iters,
            neighbors=self.neighbors,
            metric=self.metric,
            leaf_size_threshold=self.leaf_size_threshold,
            center_mode=CenterMode.mean,
            epsilon=self.epsilon,
            floyd_block=self.floyd_block,
        )

    def to_trace_dict(self) -> Dict[str, object]:
        return {
            "layers": self.layers,
            "clusters_per_node": self.clusters_per_node,
            "sub_clusters": self.sub_clusters,
            "kmeans_iters": self.kmeans_iters,
            "neighbors": self.neighbors,
            "metric": self.metric.value,
            "leaf_size_threshold": self.leaf_threshold,
            "center_mode": self.center_mode.value,
            "epsilon": self.epsilon,
            "floyd_block": self.floyd_block,
        }

    @classmethod
    def from_trace_dict(cls, data: Mapping[str, Any]) -> "HierarchyConfig":
        return cls(
            layers=int(data["layers"]),
            clusters_per_node=int(data["clusters_per_node"]),
            sub_clusters=int(data["sub_clusters"]),
            kmeans_iters=int(data["kmeans_iters"]),
            neighbors=int(data["neighbors"]),
            metric=MetricKind(data["metric"]),
            leaf_size_threshold=int(data["leaf_size_threshold"]),
            center_mode=CenterMode(data["center_mode"]),
            epsilon=data.get("epsilon"),
            floyd_block=int(data.get("floyd_block", 64)),
        )


@dataclass(frozen=True)
class AngleNormConfig:
    """Truncation and temperature for turning path lengths into logits."""

    max_angle: float = 4 * math.pi
    temperature: float = 0.07   # not given by the method; standard contrastive value

    def __post_init__(self) -> None:
        if not self.max_angle > 0:
            raise ValueError(f"max_angle must be > 0, got {self.max_angle}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    def to_trace_dict(self) -> Dict[str, object]:
        return {"max_angle": self.max_angle, "temperature": self.temperature}


@dataclass(frozen=True)
class PoolConfig:
    """Circular sample pool sizing and rebuild schedule."""

    capacity: int = 4096
    dim: int = 256
    rebuild_period: int = 100   # T0

    def __post_init__(self) -> None:
        if self.capacity < 1 or self.dim < 1 or self.rebuild_period < 1:
            raise ValueError("capacity, dim and rebuild_period must all be >= 1")

    def to_trace_dict(self) -> Dict[str, object]:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "rebuild_period": self.rebuild_period,
        }


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------
FULL: Dict[str, Any] = {
    "preset": "full",
    "capacity": 65536,
    "layers": 2,
    "clusters": 256,
    "sub_clusters": 16,
    "kmeans_iters": 5,
    "neighbors": 8,
    "metric": "cosine",
    "rebuild_period": 100,
    "max_angle": 4 * math.pi,
    "temperature": 0.07,
    "seed": 0,
}

DESK: Dict[str, Any] = {**FULL, "preset": "desk", "capacity": 4096, "clusters": 64}

RUN_PRESETS: Dict[str, Dict[str, Any]] = {
    "full": FULL,
    "desk": DESK,
}

DEFAULT_PRESET = "desk"


def get_run_preset(name: str) -> Dict[str, Any]:
    """Return a copy of the named preset.

    Falls back to DESK if the name is unrecognised.
    """
    return dict(RUN_PRESETS.get(name, DESK))


# ---------------------------------------------------------------------------
# Config file layering
# ---------------------------------------------------------------------------
def parse_config_file(path: str) -> Dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment.

    Keys may use dashes or underscores. Values stay strings; RunConfig
    coerces them.
    """
    values: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_run_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Layer preset < file < overrides; None-valued overrides are ignored.

    A ``preset`` key in the file only picks the base when no preset was
    passed explicitly.
    """
    file_values = parse_config_file(config_path) if config_path else {}
    base = preset or file_values.get("preset") or DEFAULT_PRESET
    merged: Dict[str, Any] = get_run_preset(base)
    merged.update((k, v) for k, v in file_values.items() if k != "preset")
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    return RunConfig(**merged)


# ---------------------------------------------------------------------------
# Thread count (user-controllable, clamped)
# ---------------------------------------------------------------------------
MIN_THREADS = 1
MAX_THREADS = 64


def clamp_threads(value: int) -> int:
    """Clamp a user-supplied thread count to [1, 64]."""
    return max(MIN_THREADS, min(MAX_THREADS, int(value)))


def resolve_threads(value: Optional[int] = None) -> int:
    """--threads, else GEODIST_THREADS, else the CPU count."""
    if value is None:
        env_value = os.getenv("GEODIST_THREADS")
        if env_value and env_value.strip().isdigit():
            value = int(env_value)
        else:
            value = os.cpu_count() or 1
    return clamp_threads(value)
