"""Exact Geodesic Oracle — full k-NN graph over every point, no hierarchy.

The table is computed twice (blocked Floyd and per-source Dijkstra) and the
two must agree, so the oracle checks itself before anything is compared to
it.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import spearmanr

from core.graph import KnnGraph, build_knn_graph, dijkstra_apsp, floyd_apsp
from core.hierarchy import HierarchicalIndex, query_all
from core.metrics import ArrayLike, ingest_points
from core.structured_logger import EventType, log_event
from schemas import ApproximationReport, MetricKind

logger = logging.getLogger(__name__)

DEFAULT_SIZE_LIMIT = 4096
DEFAULT_CROSS_CHECK_TOLERANCE = 1e-12


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------
class SizeLimitExceeded(Exception):
    """Raised when the oracle is asked for more points than it will handle."""

    def __init__(self, limit: int, requested: int):
        self.limit = limit
        self.requested = requested
        super().__init__(
            f"exact oracle limited to {limit} points (requested {requested}); "
            "use the hierarchical index for larger pools"
        )


class OracleMismatch(Exception):
    """Raised when Floyd and Dijkstra disagree."""

    def __init__(self, max_abs_diff: float, tolerance: float, reachability_mismatches: int):
        self.max_abs_diff = max_abs_diff
        self.tolerance = tolerance
        self.reachability_mismatches = reachability_mismatches
        super().__init__(
            f"Floyd/Dijkstra mismatch: max |diff|={max_abs_diff:.3e} "
            f"(tolerance {tolerance:.1e}), reachability mismatches={reachability_mismatches}"
        )


@dataclass(eq=False)
class ExactGeodesicTable:
    dist: np.ndarray
    source_graph: KnnGraph
    cross_check_diff: Optional[float] = None

    @property
    def node_count(self) -> int:
        return self.source_graph.node_count


# ---------------------------------------------------------------------------
# Cross-check
# ---------------------------------------------------------------------------
def compare_tables(a: np.ndarray, b: np.ndarray) -> tuple:
    """(max |a−b| over pairs finite in both, count of reachability mismatches)."""
    fa = np.isfinite(a)
    fb = np.isfinite(b)
    both = fa & fb
    diff = float(np.max(np.abs(a[both] - b[both]))) if both.any() else 0.0
    return diff, int(np.count_nonzero(fa != fb))


def exact_geodesic(
    points: ArrayLike,
    k: int,
    kind: MetricKind = MetricKind.cosine,
    limit: int = DEFAULT_SIZE_LIMIT,
    cross_check: bool = True,
    tolerance: float = DEFAULT_CROSS_CHECK_TOLERANCE,
    epsilon: Optional[float] = None,
) -> ExactGeodesicTable:
    """Shortest-path metric of the k-NN graph over all points (cosine input is unit-projected)."""
    X = ingest_points(points, kind)
    if len(X) > limit:
        log_event(logger, logging.WARNING, EventType.SIZE_LIMIT_HIT, "oracle size limit",
                  limit=limit, requested=len(X))
        raise SizeLimitExceeded(limit, len(X))
    g = build_knn_graph(X, k, kind, epsilon=epsilon)
    start = time.monotonic()
    dist = floyd_apsp(g)
    diff = None
    if cross_check:
        diff, mismatches = compare_tables(dist, dijkstra_apsp(g))
        log_event(logger, logging.INFO, EventType.ORACLE_CROSS_CHECK, "oracle cross-checked",
                  points=len(X), max_abs_diff=diff, reachability_mismatches=mismatches,
                  latency_ms=(time.monotonic() - start) * 1000)
        # Tolerance scales with the largest distance for long Euclidean paths.
        finite = dist[np.isfinite(dist)]
        scale = max(1.0, float(finite.max())) if finite.size else 1.0
        if diff > tolerance * scale or mismatches:
            raise OracleMismatch(diff, tolerance, mismatches)
    return ExactGeodesicTable(dist, g, diff)


# ---------------------------------------------------------------------------
# Hierarchical vs exact
# ---------------------------------------------------------------------------
def approximation_report(
    idx: HierarchicalIndex,
    table: ExactGeodesicTable,
    hierarchical: Optional[np.ndarray] = None,
) -> ApproximationReport:
    """Error distribution of the hierarchical distances over all pairs i < j."""
    H = query_all(idx) if hierarchical is None else hierarchical
    return compare_matrices(H, table.dist)


def compare_matrices(H: np.ndarray, E: np.ndarray) -> ApproximationReport:
    if H.shape != E.shape:
        raise ValueError(f"shape mismatch {H.shape} vs {E.shape}")
    iu = np.triu_indices(len(E), k=1)
    h = H[iu]
    e = E[iu]
    fh = np.isfinite(h)
    fe = np.isfinite(e)
    both = fh & fe
    err = h[both] - e[both]
    abs_err = np.abs(err)
    positive = e[both] > 0
    rel = abs_err[positive] / e[both][positive]
    if rel.size:
        p50, p90, p99 = (float(q) for q in np.quantile(rel, [0.5, 0.9, 0.99]))
        max_rel = float(rel.max())
    else:
        p50 = p90 = p99 = max_rel = 0.0
    spearman = None
    if both.sum() > 2 and np.ptp(h[both]) > 0 and np.ptp(e[both]) > 0:
        spearman = float(spearmanr(h[both], e[both]).statistic)
    return ApproximationReport(
        pair_count=int(len(e)),
        compared_pairs=int(both.sum()),
        reachability_disagreements=int(np.count_nonzero(fh != fe)),
        hierarchical_only_reachable=int(np.count_nonzero(fh & ~fe)),
        exact_only_reachable=int(np.count_nonzero(~fh & fe)),
        mean_abs_error=float(abs_err.mean()) if abs_err.size else 0.0,
        max_abs_error=float(abs_err.max()) if abs_err.size else 0.0,
        rel_error_p50=p50,
        rel_error_p90=p90,
        rel_error_p99=p99,
        max_rel_error=max_rel,
        below_exact=int(np.count_nonzero(err < -1e-12)),
        spearman=spearman,
    )
