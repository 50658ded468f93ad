import math
from enum import Enum
from typing import Annotated, Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator


Similarity = Annotated[float, Field(ge=-1.0, le=1.0)]
Fraction = Annotated[float, Field(ge=0.0, le=1.0)]


class MetricKind(str, Enum):
    cosine = "cosine"          # angular form, arccos of the inner product
    euclidean = "euclidean"


class CenterMode(str, Enum):
    mean = "mean"
    medoid = "medoid"


class SimilarityMetric(str, Enum):
    geodesic = "geodesic"
    cosine = "cosine"


class SweepParam(str, Enum):
    layers = "layers"
    clusters = "clusters"
    neighbors = "neighbors"
    rebuild_period = "rebuild-period"


class CheckStatus(str, Enum):
    passed = "pass"
    failed = "fail"
    out_of_assumption = "out_of_assumption"


# ---------------------------------------------------------------------------
# Graph reports
# ---------------------------------------------------------------------------
class ComponentReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    component_count: int = Field(..., ge=0, description="Number of connected components")
    component_sizes: List[int] = Field(..., description="Size of each component, in label order")
    edge_count: int = Field(..., ge=0, description="Number of undirected edges")


class BoundsReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    node_count: int = Field(..., ge=0)
    sigma: int = Field(..., ge=0, description="Neighbour count the graph was built with")
    min_degree: int = Field(..., ge=0)
    components: ComponentReport
    theorem1_bound: Optional[float] = Field(None, description="Upper bound on the component count")
    theorem1_status: CheckStatus
    a: Optional[int] = Field(None, description="Exclusive upper size bound used for the edge-count check")
    b: Optional[int] = Field(None, description="Exclusive lower size bound used for the edge-count check")
    edge_lower: Optional[float] = None
    edge_upper: Optional[float] = None
    edge_upper_concise: Optional[float] = None
    theorem2_status: CheckStatus
    failures: List[str] = Field(default_factory=list, description="Human-readable failed checks")

    @property
    def ok(self) -> bool:
        return not self.failures


class BoundsRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma: int
    node_count: int
    component_count: int
    theorem1_bound: Optional[float]
    theorem1_status: CheckStatus
    edge_count: int
    theorem2_status: CheckStatus


# ---------------------------------------------------------------------------
# Index build / pool
# ---------------------------------------------------------------------------
class LayerStats(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer: int = Field(..., ge=0, description="0 is the top layer")
    center_count: int
    group_count: int
    edge_count: int
    component_count: int = Field(..., description="Components summed over every centre graph of the layer")
    theorem1_bound: float = Field(..., description="Bound summed over every centre graph of the layer")
    up_cost_fallbacks: int = 0


class BuildStats(BaseModel):
    model_config = ConfigDict(extra="forbid")

    point_count: int
    dim: int
    bottom_center_count: int
    flat_equivalent: bool = Field(..., description="One layer with one centre per point")
    component_count: int = Field(..., description="Components of the top centre graph")
    theorem1_bound: float = Field(..., description="Bound for the top centre graph")
    theorem1_margin: float = Field(..., description="theorem1_bound - component_count")
    layers: List[LayerStats]
    warnings: List[str] = Field(default_factory=list)
    build_ms: float = 0.0


class InsertReceipt(BaseModel):
    model_config = ConfigDict(extra="forbid")

    positions: List[int] = Field(..., description="Slots written, in batch order")
    filled: int = Field(..., ge=0)
    cursor: int = Field(..., ge=0)
    evicted: int = Field(0, ge=0, description="Occupied slots that were overwritten")


# ---------------------------------------------------------------------------
# Similarity / loss
# ---------------------------------------------------------------------------
class LossReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    info_nce: float = Field(..., ge=0.0)
    per_row_rank_of_positive: List[int]


class MiningStats(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rows: int
    mean_rank: float
    median_rank: float
    top1_rate: Fraction
    top5_rate: Fraction
    margin_p10: float
    margin_p50: float
    margin_p90: float
    truncation_rate: Fraction = 0.0
    unreachable_rate: Fraction = 0.0


class ApproximationReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pair_count: int
    compared_pairs: int = Field(..., description="Pairs finite under both metrics")
    reachability_disagreements: int
    hierarchical_only_reachable: int
    exact_only_reachable: int
    mean_abs_error: float
    max_abs_error: float
    rel_error_p50: float
    rel_error_p90: float
    rel_error_p99: float
    max_rel_error: float
    below_exact: int = Field(..., description="Pairs where the hierarchical value undercuts the exact one")
    spearman: Optional[float] = None


# ---------------------------------------------------------------------------
# Simulation trace
# ---------------------------------------------------------------------------
class StepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int = Field(..., ge=1, description="Training step t, 1-based")
    metric: SimilarityMetric
    loss: float = Field(..., description="Mean of both directions")
    loss_ab: float
    loss_ba: float
    mean_rank: float
    mean_rank_ab: float
    mean_rank_ba: float
    margin_p10: float = Field(..., description="Positive-minus-best-negative margin quantiles")
    margin_p50: float
    margin_p90: float
    truncation_rate: Fraction
    unreachable_rate: Fraction
    rebuild: bool = Field(False, description="Scheduled rebuild ran at the start of this step")
    warmup_build: bool = False
    pool_filled: int
    positions: List[int] = Field(..., description="Slots the momentum batch of pool B was written to")
    timing: Dict[str, float] = Field(default_factory=dict, description="Wall-clock timings; excluded from determinism checks")


class RunSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    run_id: str
    metric: SimilarityMetric
    steps: int
    batch: int
    mean_loss: float
    mean_rank: float
    final_mean_rank: float = Field(..., description="Mean rank over the last quarter of the run")
    rebuild_steps: List[int]
    warmup_steps: List[int]
    truncation_rate: Fraction
    unreachable_rate: Fraction
    config: Dict[str, Any]


# ---------------------------------------------------------------------------
# Flat run configuration (key = value files and CLI flags)
# ---------------------------------------------------------------------------
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    preset: str = Field("desk", description="Preset the values were layered on")
    capacity: int = Field(4096, ge=1, description="Pool capacity N")
    layers: int = Field(2, ge=1)
    clusters: int = Field(64, ge=1, description="Top-layer cluster count")
    sub_clusters: int = Field(16, ge=1)
    kmeans_iters: int = Field(5, ge=0)
    neighbors: int = Field(8, ge=1, description="Neighbours per centre (σ)")
    metric: MetricKind = MetricKind.cosine
    leaf_size_threshold: Optional[int] = Field(None, ge=1)
    center_mode: CenterMode = CenterMode.mean
    epsilon: Optional[float] = Field(None, ge=0.0)
    rebuild_period: int = Field(100, ge=1, description="T0")
    max_angle: float = Field(4 * math.pi, gt=0.0)
    temperature: float = Field(0.07, gt=0.0)
    delta: Optional[float] = Field(None, gt=0.0, description="Simple-manifold threshold, default sqrt(dim)")
    exclude_unreachable: bool = False
    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)

    @field_validator("max_angle", mode="before")
    @classmethod
    def parse_pi_multiple(cls, v: Any) -> Any:
        # Accepts "pi", "4pi" and "4*pi" besides plain numbers.
        if isinstance(v, str):
            text = v.strip().lower().replace("*", "").replace("π", "pi")
            if text.endswith("pi"):
                factor = text[:-2].strip()
                return (float(factor) if factor else 1.0) * math.pi
        return v

    def hierarchy_config(self) -> "HierarchyConfig":
        from core.run_config import HierarchyConfig

        return HierarchyConfig(
            layers=self.layers,
            clusters_per_node=self.clusters,
            sub_clusters=self.sub_clusters,
            kmeans_iters=self.kmeans_iters,
            neighbors=self.neighbors,
            metric=self.metric,
            leaf_size_threshold=self.leaf_size_threshold,
            center_mode=self.center_mode,
            epsilon=self.epsilon,
        )

    def angle_config(self) -> "AngleNormConfig":
        from core.run_config import AngleNormConfig

        return AngleNormConfig(max_angle=self.max_angle, temperature=self.temperature)

    def pool_config(self, dim: int) -> "PoolConfig":
        from core.run_config import PoolConfig

        return PoolConfig(capacity=self.capacity, dim=dim, rebuild_period=self.rebuild_period)
