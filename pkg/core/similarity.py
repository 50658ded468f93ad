"""Similarity & Loss — from accumulated path angles to InfoNCE.

Provides:
  - angle_normalize(): truncate at max_angle, rescale to [0, π], take cos
  - batch_similarity(): batch rows against every occupied pool slot
  - cosine_similarity_matrix(): plain cosine baseline
  - info_nce() / mining_quality(): loss and positive-rank statistics
  - contrastive_step(): insert momentum features, score both directions
    with insertion-position labels

Unreachable slots score −1 (the easiest possible negative) unless
``exclude_unreachable`` drops them from the softmax. The positive column is
never dropped.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from core.hierarchy import GeodesicResult, HierarchicalIndex, nearest_bottom_centers
from core.metrics import ArrayLike, as_feature_matrix
from core.pool import AuxQueues, FeaturePool, GeodesicQueue
from core.run_config import AngleNormConfig
from core.structured_logger import EventType, log_event
from schemas import InsertReceipt, LossReport, MiningStats, SimilarityMetric

logger = logging.getLogger(__name__)


class SimilarityError(ValueError):
    """Raised for mismatched batches."""


@dataclass(eq=False)
class SimilarityMatrix:
    values: np.ndarray                       # (B, M) in [-1, 1]
    labels: Optional[np.ndarray] = None      # (B,) positive column per row
    unreachable: Optional[np.ndarray] = None  # (B, M) bool
    truncated: Optional[np.ndarray] = None   # (B, M) bool, finite but beyond max_angle

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def with_labels(self, labels: Sequence[int]) -> "SimilarityMatrix":
        lab = np.asarray(labels, dtype=np.int64)
        if lab.shape != (self.values.shape[0],):
            raise SimilarityError(f"{len(lab)} labels for {self.values.shape[0]} rows")
        if len(lab) and (lab.min() < 0 or lab.max() >= self.values.shape[1]):
            raise SimilarityError("label outside the column range")
        return SimilarityMatrix(self.values, lab, self.unreachable, self.truncated)

    def truncation_rate(self) -> float:
        return float(self.truncated.mean()) if self.truncated is not None and self.truncated.size else 0.0

    def unreachable_rate(self) -> float:
        return float(self.unreachable.mean()) if self.unreachable is not None and self.unreachable.size else 0.0


# ---------------------------------------------------------------------------
# Angle normalisation
# ---------------------------------------------------------------------------
def normalize_angles(angles: np.ndarray, max_angle: float) -> np.ndarray:
    a = np.minimum(np.asarray(angles, dtype=np.float64), max_angle)
    return np.cos(a / max_angle * math.pi)


def angle_normalize(g: Union[GeodesicResult, float], cfg: AngleNormConfig) -> float:
    """cos(min(angle, max_angle) / max_angle · π); unreachable gives −1."""
    angle = g.angle_sum if isinstance(g, GeodesicResult) else float(g)
    if not math.isfinite(angle):
        return -1.0
    return math.cos(min(angle, cfg.max_angle) / cfg.max_angle * math.pi)


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------
def batch_angles(
    idx: HierarchicalIndex,
    aux: AuxQueues,
    filled: int,
    batch: ArrayLike,
) -> np.ndarray:
    """(B, filled) accumulated angles: d(x_r, C_r) + D_o[m, C_r]."""
    X = as_feature_matrix(batch, dim=idx.dim, kind=idx.config.metric)
    centers, dists = nearest_bottom_centers(idx, X)
    return dists[:, None] + aux.d_o_rows[:filled, centers].T


def batch_similarity(
    idx: HierarchicalIndex,
    pool: FeaturePool,
    aux: AuxQueues,
    batch: ArrayLike,
    cfg: AngleNormConfig,
) -> SimilarityMatrix:
    """Angle-normalised geodesic similarity of each row to every pool slot."""
    X = as_feature_matrix(batch)
    if X.shape[1] != pool.dim:
        raise SimilarityError(f"batch dim {X.shape[1]} != pool dim {pool.dim}")
    angles = batch_angles(idx, aux, pool.filled, X)
    unreachable = ~np.isfinite(angles)
    truncated = ~unreachable & (angles > cfg.max_angle)
    values = normalize_angles(angles, cfg.max_angle)
    return SimilarityMatrix(values, None, unreachable, truncated)


def cosine_similarity_matrix(batch: ArrayLike, pool: FeaturePool) -> SimilarityMatrix:
    X = as_feature_matrix(batch)
    if X.shape[1] != pool.dim:
        raise SimilarityError(f"batch dim {X.shape[1]} != pool dim {pool.dim}")
    values = np.clip(X @ pool.contents().T, -1.0, 1.0)
    return SimilarityMatrix(values, None, np.zeros(values.shape, dtype=bool), np.zeros(values.shape, dtype=bool))


# ---------------------------------------------------------------------------
# Loss and mining statistics
# ---------------------------------------------------------------------------
def _column_mask(sim: SimilarityMatrix, exclude_unreachable: bool) -> np.ndarray:
    keep = np.ones(sim.values.shape, dtype=bool)
    if exclude_unreachable and sim.unreachable is not None:
        keep &= ~sim.unreachable
    keep[np.arange(len(sim.labels)), sim.labels] = True
    return keep


def positive_ranks(sim: SimilarityMatrix, exclude_unreachable: bool = False) -> np.ndarray:
    """1 + number of columns scoring strictly above the positive."""
    if sim.labels is None:
        raise SimilarityError("positive ranks need labels")
    keep = _column_mask(sim, exclude_unreachable)
    pos = sim.values[np.arange(len(sim.labels)), sim.labels]
    return 1 + np.count_nonzero((sim.values > pos[:, None]) & keep, axis=1)


def info_nce(sim: SimilarityMatrix, temperature: float, exclude_unreachable: bool = False) -> LossReport:
    """Mean over rows of −log softmax(v / τ)[label]."""
    if sim.labels is None:
        raise SimilarityError("InfoNCE needs labels")
    rows = np.arange(len(sim.labels))
    if not len(rows):
        return LossReport(info_nce=0.0, per_row_rank_of_positive=[])
    logits = sim.values / temperature
    keep = _column_mask(sim, exclude_unreachable)
    logits = np.where(keep, logits, -np.inf)
    per_row = logsumexp(logits, axis=1) - logits[rows, sim.labels]
    loss = float(np.maximum(per_row, 0.0).mean())
    ranks = positive_ranks(sim, exclude_unreachable)
    return LossReport(info_nce=loss, per_row_rank_of_positive=[int(r) for r in ranks])


def mining_quality(sim: SimilarityMatrix, exclude_unreachable: bool = False) -> MiningStats:
    """Positive-rank distribution and hardest-negative margins.

    A row with no negatives measures its margin against −1, the floor of
    the similarity range.
    """
    ranks = positive_ranks(sim, exclude_unreachable)
    rows = np.arange(len(ranks))
    if not len(rows):
        return MiningStats(rows=0, mean_rank=0.0, median_rank=0.0, top1_rate=0.0, top5_rate=0.0,
                           margin_p10=0.0, margin_p50=0.0, margin_p90=0.0)
    pos = sim.values[rows, sim.labels]
    negatives = np.where(_column_mask(sim, exclude_unreachable), sim.values, -np.inf)
    negatives[rows, sim.labels] = -np.inf
    hardest = np.maximum(negatives.max(axis=1), -1.0)
    margins = pos - hardest
    p10, p50, p90 = np.quantile(margins, [0.1, 0.5, 0.9])
    return MiningStats(
        rows=len(rows),
        mean_rank=float(ranks.mean()),
        median_rank=float(np.median(ranks)),
        top1_rate=float(np.mean(ranks == 1)),
        top5_rate=float(np.mean(ranks <= 5)),
        margin_p10=float(p10),
        margin_p50=float(p50),
        margin_p90=float(p90),
        truncation_rate=sim.truncation_rate(),
        unreachable_rate=sim.unreachable_rate(),
    )


# ---------------------------------------------------------------------------
# One contrastive step
# ---------------------------------------------------------------------------
@dataclass
class ContrastiveResult:
    loss_ab: LossReport
    loss_ba: LossReport
    receipt_a: InsertReceipt
    receipt_b: InsertReceipt
    sim_ab: SimilarityMatrix
    sim_ba: SimilarityMatrix


def score_against(
    queue: GeodesicQueue,
    batch: ArrayLike,
    cfg: AngleNormConfig,
    metric: SimilarityMetric = SimilarityMetric.geodesic,
) -> SimilarityMatrix:
    X = queue.prepare_batch(batch)
    if metric == SimilarityMetric.cosine or queue.index is None:
        return cosine_similarity_matrix(X, queue.pool)
    return batch_similarity(queue.index, queue.pool, queue.aux, X, cfg)


def contrastive_step(
    queue_a: GeodesicQueue,
    queue_b: GeodesicQueue,
    batch_a: ArrayLike,
    batch_b: ArrayLike,
    momentum_a: ArrayLike,
    momentum_b: ArrayLike,
    cfg: AngleNormConfig,
    metric: SimilarityMetric = SimilarityMetric.geodesic,
    exclude_unreachable: bool = False,
) -> ContrastiveResult:
    """Insert momentum features first, then score A→B and B→A.

    Row r's positive is wherever its momentum partner was just written.
    """
    sizes = {len(as_feature_matrix(m)) for m in (batch_a, batch_b, momentum_a, momentum_b)}
    if len(sizes) != 1:
        raise SimilarityError(f"batch size mismatch: {sorted(sizes)}")

    receipt_b = queue_b.insert(momentum_b)
    receipt_a = queue_a.insert(momentum_a)

    sim_ab = score_against(queue_b, batch_a, cfg, metric).with_labels(receipt_b.positions)
    sim_ba = score_against(queue_a, batch_b, cfg, metric).with_labels(receipt_a.positions)

    loss_ab = info_nce(sim_ab, cfg.temperature, exclude_unreachable)
    loss_ba = info_nce(sim_ba, cfg.temperature, exclude_unreachable)

    truncation = max(sim_ab.truncation_rate(), sim_ba.truncation_rate())
    if truncation > 0:
        log_event(logger, logging.DEBUG, EventType.TRUNCATION_OBSERVED,
                  "geodesic angles beyond max_angle", truncation_rate=round(truncation, 6))
    return ContrastiveResult(loss_ab, loss_ba, receipt_a, receipt_b, sim_ab, sim_ba)
