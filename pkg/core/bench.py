"""Benchmarks and Sweeps — tabular reports for the CLI.

Provides:
  - bench_sizes(): build / query / insert / rebuild / oracle timings per pool size
  - floyd_scaling(): Floyd time over centre counts plus the log-log slope
  - bounds_frame(): one row per σ of a component-bound sweep
  - sweep_parameter(): vary one hierarchy parameter, report fidelity or rank

Timings are wall-clock and machine-dependent; every other column is
deterministic for a given seed.
"""

import logging
import math
import time
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.graph import build_knn_graph, floyd_apsp
from core.hierarchy import build_index, query_all, query_in_pool, sample_pairs
from core.metrics import ArrayLike, as_feature_matrix, normalize_rows
from core.oracle import DEFAULT_SIZE_LIMIT, approximation_report, exact_geodesic
from core.pool import AuxQueues, FeaturePool, insert_batch, rebuild
from core.structured_logger import EventType, log_event
from core.synth import make_rng
from schemas import BoundsReport, BoundsRow, MetricKind, RunConfig, SimilarityMetric, SweepParam

logger = logging.getLogger(__name__)

FLOYD_SIZES = (128, 256, 512)
INSERT_BATCH = 256


def _timed(fn: Callable[[], object]) -> tuple:
    start = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - start) * 1000


def random_unit_points(n: int, dim: int, seed: int) -> np.ndarray:
    return normalize_rows(make_rng(seed).standard_normal((n, dim)))


# ---------------------------------------------------------------------------
# Pool-size benchmark
# ---------------------------------------------------------------------------
def bench_sizes(
    sizes: Sequence[int],
    config: RunConfig,
    dim: int = 16,
    query_pairs: int = 2000,
    threads: int = 1,
) -> pd.DataFrame:
    """One row per pool size.

    ``query_speedup`` compares one hierarchical pair query with rebuilding
    the exact oracle for that query; it is blank above the oracle limit.
    """
    rows: List[Dict[str, object]] = []
    hier = config.hierarchy_config()
    for n in sizes:
        X = random_unit_points(n, dim, config.seed + n)
        cfg = replace(hier, clusters_per_node=min(hier.clusters_per_node, n), metric=MetricKind.cosine)

        idx, build_ms = _timed(lambda: build_index(X, cfg, config.seed, threads))

        pairs = sample_pairs(n, query_pairs, config.seed)
        _, query_ms = _timed(lambda: [query_in_pool(idx, i, j) for i, j in pairs])
        per_query_ms = query_ms / max(1, len(pairs))

        pool = FeaturePool(n, dim, config.rebuild_period)
        pool.write(X)
        aux = AuxQueues(n)
        aux.load_from_index(idx)
        inserts = min(INSERT_BATCH, n)
        extra = random_unit_points(inserts, dim, config.seed + n + 1)
        _, insert_ms = _timed(lambda: insert_batch(pool, aux, idx, extra))
        _, rebuild_ms = _timed(lambda: rebuild(pool, aux, cfg, config.seed, threads))

        oracle_ms = math.nan
        if n <= DEFAULT_SIZE_LIMIT:
            _, oracle_ms = _timed(lambda: exact_geodesic(X, hier.neighbors, MetricKind.cosine, cross_check=False))

        row = {
            "n": n,
            "dim": dim,
            "clusters": cfg.clusters_per_node,
            "bottom_centers": len(idx.bottom_centers),
            "build_ms": round(build_ms, 3),
            "query_per_s": round(1000.0 / per_query_ms, 1) if per_query_ms > 0 else math.inf,
            "insert_per_s": round(inserts * 1000.0 / insert_ms, 1) if insert_ms > 0 else math.inf,
            "rebuild_ms": round(rebuild_ms, 3),
            "oracle_ms": round(oracle_ms, 3) if not math.isnan(oracle_ms) else math.nan,
            "query_speedup": round(oracle_ms / per_query_ms, 1) if per_query_ms > 0 and not math.isnan(oracle_ms) else math.nan,
        }
        log_event(logger, logging.INFO, EventType.BENCH_ROW, "bench row", **row)
        rows.append(row)
    return pd.DataFrame(rows)


def floyd_scaling(
    sizes: Sequence[int] = FLOYD_SIZES,
    dim: int = 16,
    neighbors: int = 8,
    seed: int = 0,
    repeats: int = 3,
) -> tuple:
    """(frame, slope): best-of-``repeats`` Floyd time per centre count and
    the slope of log(time) against log(count)."""
    rows = []
    for m in sizes:
        g = build_knn_graph(random_unit_points(m, dim, seed + m), min(neighbors, m - 1), MetricKind.cosine)
        best = min(_timed(lambda: floyd_apsp(g))[1] for _ in range(max(1, repeats)))
        rows.append({"centers": m, "floyd_ms": round(best, 3)})
    frame = pd.DataFrame(rows)
    slope = math.nan
    if len(frame) >= 2 and (frame["floyd_ms"] > 0).all():
        slope = float(np.polyfit(np.log(frame["centers"]), np.log(frame["floyd_ms"]), 1)[0])
    frame["loglog_slope"] = round(slope, 4) if not math.isnan(slope) else math.nan
    return frame, slope


# ---------------------------------------------------------------------------
# Bounds sweep table
# ---------------------------------------------------------------------------
def bounds_frame(reports: Sequence[BoundsReport]) -> pd.DataFrame:
    rows = [
        BoundsRow(
            sigma=r.sigma,
            node_count=r.node_count,
            component_count=r.components.component_count,
            theorem1_bound=r.theorem1_bound,
            theorem1_status=r.theorem1_status,
            edge_count=r.components.edge_count,
            theorem2_status=r.theorem2_status,
        ).model_dump(mode="json")
        for r in reports
    ]
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Hyper-parameter sweep
# ---------------------------------------------------------------------------
def sweep_parameter(
    points: ArrayLike,
    config: RunConfig,
    param: SweepParam,
    values: Sequence[int],
    oracle_k: Optional[int] = None,
    points_b: Optional[ArrayLike] = None,
    steps: int = 200,
    batch: int = 32,
    threads: int = 1,
) -> pd.DataFrame:
    """Vary one parameter, everything else fixed.

    Graph parameters (layers, clusters, neighbors) are scored against the
    exact oracle over ``points``; the rebuild period needs paired data and
    is scored by the simulated mean positive rank.
    """
    X = as_feature_matrix(points)
    rows: List[Dict[str, object]] = []
    if param == SweepParam.rebuild_period:
        if points_b is None:
            raise ValueError("a rebuild-period sweep needs paired data (points_b)")
        from simulator import run_simulation

        for v in values:
            cfg = config.model_copy(update={"rebuild_period": int(v)})
            result = run_simulation(cfg, X, points_b, steps, batch, SimilarityMetric.geodesic, threads=threads)
            rows.append({
                "param": param.value,
                "value": int(v),
                "mean_rank": result.summary.mean_rank,
                "final_mean_rank": result.summary.final_mean_rank,
                "mean_loss": result.summary.mean_loss,
                "rebuilds": len(result.summary.rebuild_steps),
            })
        return pd.DataFrame(rows)

    field = {SweepParam.layers: "layers", SweepParam.clusters: "clusters", SweepParam.neighbors: "neighbors"}[param]
    table = exact_geodesic(X, oracle_k or config.neighbors, config.metric, epsilon=config.epsilon)
    for v in values:
        cfg = config.model_copy(update={field: int(v)})
        idx, build_ms = _timed(lambda: build_index(X, cfg.hierarchy_config(), cfg.seed, threads))
        report = approximation_report(idx, table, query_all(idx))
        rows.append({
            "param": param.value,
            "value": int(v),
            "bottom_centers": len(idx.bottom_centers),
            "build_ms": round(build_ms, 3),
            "spearman": report.spearman,
            "rel_error_p50": report.rel_error_p50,
            "rel_error_p90": report.rel_error_p90,
            "reachability_disagreements": report.reachability_disagreements,
        })
    return pd.DataFrame(rows)
