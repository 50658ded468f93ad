"""End-to-end acceptance checks at desk scale.

Covers:
  - Flat configuration equals the exact oracle on several datasets
  - Floyd vs Dijkstra on random graphs
  - Component-count bound on random k-NN graphs
  - Swiss-roll fidelity of graph geodesics and of the hierarchical index
  - Queue consistency under interleaved inserts and rebuilds, FIFO replay
  - Angle-normalisation contract and softmax shift invariance
  - Geodesic vs cosine mining on the warped paired dataset
  - Serialisation round trips and run determinism

Slow (a few minutes). Run: python tests/test_acceptance.py
"""

import hashlib
import io
import math
import os
import sys
import tempfile
import time
from collections import deque
from contextlib import redirect_stderr, redirect_stdout

# Ensure project root on path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from core.graph import KnnGraph, build_knn_graph, dijkstra_apsp, floyd_apsp, theorem1_bound, validate_bounds
from core.hierarchy import build_index, query_all, query_in_pool, sample_pairs
from core.metrics import normalize_rows
from core.oracle import exact_geodesic
from core.pool import GeodesicQueue
from core.run_analytics import traces_equal
from core.run_config import AngleNormConfig, HierarchyConfig, PoolConfig
from core.similarity import SimilarityMatrix, angle_normalize, info_nce
from core.storage import read_embeddings, read_index, write_embeddings, write_index
from core.synth import gen_sphere_blobs, gen_swiss_roll, intrinsic_distances, paired_strands
from main import main
from schemas import CheckStatus, MetricKind, RunConfig, SimilarityMetric
from simulator import load_trace, run_simulation

# ── Test infrastructure ─────────────────────────────────────────────────────

passed = 0
failed = 0


def check(name: str, condition: bool, detail: str = ""):
    global passed, failed
    if condition:
        passed += 1
        print(f"  PASS: {name}")
    else:
        failed += 1
        print(f"  FAIL: {name} {('— ' + detail) if detail else ''}")


def unit_points(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return normalize_rows(rng.standard_normal((n, dim)))


def upper(M: np.ndarray) -> np.ndarray:
    return M[np.triu_indices(len(M), k=1)]


def same_extended(a: np.ndarray, b: np.ndarray, rel: float) -> bool:
    """Equal reachability, finite entries within a relative tolerance."""
    fa, fb = np.isfinite(a), np.isfinite(b)
    if not np.array_equal(fa, fb):
        return False
    return bool(np.all(np.abs(a[fa] - b[fa]) <= rel * np.maximum(1.0, np.abs(b[fa]))))


def run_cli(*argv: str) -> tuple:
    out = io.StringIO()
    with redirect_stdout(out), redirect_stderr(io.StringIO()):
        code = main(list(argv))
    return code, out.getvalue()


def sha1(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha1(fh.read()).hexdigest()


started = time.monotonic()


# ── 1. Flat equivalence ─────────────────────────────────────────────────────

print("\n=== 1. Flat Equivalence ===\n")

for trial, n in enumerate([64, 128, 256, 64, 128]):
    P = unit_points(n, 16, seed=1000 + trial)
    idx = build_index(P, HierarchyConfig(layers=1, clusters_per_node=n, neighbors=8), seed=trial)
    exact = exact_geodesic(P, 8)
    check(f"flat_equals_exact_n{n}_trial{trial}", same_extended(query_all(idx), exact.dist, 1e-9))


# ── 2. APSP correctness ─────────────────────────────────────────────────────

print("\n=== 2. Floyd vs Dijkstra ===\n")

rng = np.random.Generator(np.random.Philox(2000))
worst = 0.0
mismatch = 0
for trial in range(120):
    n = int(rng.integers(2, 129))
    m = int(rng.integers(0, 4 * n))
    edges = [(int(i), int(j), float(w))
             for i, j, w in zip(rng.integers(0, n, m), rng.integers(0, n, m), rng.random(m) * 5)
             if i != j]
    g = KnnGraph.from_edges(n, edges)
    Df, Dd = floyd_apsp(g, block=int(rng.integers(1, 70))), dijkstra_apsp(g)
    both = np.isfinite(Df) & np.isfinite(Dd)
    mismatch += int(np.count_nonzero(np.isfinite(Df) != np.isfinite(Dd)))
    if both.any():
        worst = max(worst, float(np.max(np.abs(Df[both] - Dd[both]))))
check("floyd_dijkstra_max_diff", worst <= 1e-12, f"{worst:.3e}")
check("floyd_dijkstra_reachability", mismatch == 0)


# ── 3. Component bound ──────────────────────────────────────────────────────

print("\n=== 3. Component Bound ===\n")

bound = theorem1_bound(256, 8)
check("bound_value", abs(bound - 90.94) < 0.01, f"{bound:.4f}")
degree_ok = True
count_ok = True
worst_count = 0
for trial in range(50):
    report = validate_bounds(build_knn_graph(unit_points(256, 8, seed=3000 + trial), 8))
    degree_ok &= report.min_degree >= 8
    count_ok &= report.components.component_count <= bound and report.theorem1_status == CheckStatus.passed
    worst_count = max(worst_count, report.components.component_count)
check("min_degree_at_least_sigma", degree_ok)
check("component_count_within_bound_50_trials", count_ok, f"worst={worst_count}")


# ── 4. Swiss-roll fidelity ──────────────────────────────────────────────────

print("\n=== 4. Swiss Roll ===\n")

roll = gen_swiss_roll(2000, seed=4)
truth = upper(intrinsic_distances(roll))
geo = upper(exact_geodesic(roll.points, 8, MetricKind.euclidean).dist)
finite = np.isfinite(geo)
rho_geo = float(spearmanr(geo[finite], truth[finite]).statistic)
rho_amb = float(spearmanr(upper(cdist(roll.points, roll.points)), truth).statistic)
check("geodesic_beats_ambient_by_0_05", rho_geo >= rho_amb + 0.05, f"geo={rho_geo:.4f} ambient={rho_amb:.4f}")


def hierarchical_rho(clusters: int) -> float:
    hier = build_index(roll.points, HierarchyConfig(layers=2, clusters_per_node=clusters, neighbors=8,
                                                    metric=MetricKind.euclidean), seed=4)
    h = upper(query_all(hier))
    hf = np.isfinite(h)
    return float(spearmanr(h[hf], truth[hf]).statistic) if hf.sum() > 2 else math.nan


rho_fine = hierarchical_rho(512)
check("hierarchical_within_0_05_of_exact_at_512_clusters", rho_fine >= rho_geo - 0.05,
      f"hier={rho_fine:.4f} exact={rho_geo:.4f}")

# At 64 centres the top graph bridges adjacent turns of the roll; the
# baseline is pinned so a change in either direction shows up here.
rho_coarse = hierarchical_rho(64)
check("coarse_64_cluster_baseline", 0.25 <= rho_coarse < rho_geo - 0.05,
      f"hier={rho_coarse:.4f} exact={rho_geo:.4f}")


# ── 5. Queue consistency ────────────────────────────────────────────────────

print("\n=== 5. Queue Consistency ===\n")

queue = GeodesicQueue(PoolConfig(capacity=512, dim=8, rebuild_period=20),
                      HierarchyConfig(layers=2, clusters_per_node=16, sub_clusters=4, neighbors=4), seed=5)
replay = deque(maxlen=512)
rng = np.random.Generator(np.random.Philox(5000))
violations = 0
rebuilds = 0
for op in range(1000):
    if rng.random() < 0.5:
        rebuilds += int(queue.begin_step().rebuild)
    else:
        batch = queue.prepare_batch(rng.standard_normal((int(rng.integers(1, 65)), 8)))
        queue.insert(batch)
        replay.extend(batch)
    violations += queue.consistency_violations()
snapshot = np.array([v for _, v, _ in queue.pool.snapshot()])
check("d_o_consistent_after_every_op", violations == 0, f"{violations} violations")
check("fifo_matches_replay_log", np.array_equal(snapshot, np.array(replay)))
check("scheduled_rebuilds_ran", rebuilds > 0, str(rebuilds))


# ── 6. Angle normalisation ──────────────────────────────────────────────────

print("\n=== 6. Angle Normalisation ===\n")

acfg = AngleNormConfig()
check("normalize_zero", angle_normalize(0.0, acfg) == 1.0)
check("normalize_four_pi", angle_normalize(4 * math.pi, acfg) == -1.0)
check("normalize_two_pi", abs(angle_normalize(2 * math.pi, acfg)) < 1e-15)
check("normalize_infinity", angle_normalize(math.inf, acfg) == -1.0)
values = np.random.Generator(np.random.Philox(6000)).random(10_000) * 5 * math.pi
ordered = [angle_normalize(float(a), acfg) for a in np.sort(values)]
check("normalize_monotone_10k", all(x >= y for x, y in zip(ordered, ordered[1:])))

rows = np.random.Generator(np.random.Philox(6001)).uniform(-1, 1, (6, 20))
base = SimilarityMatrix(rows).with_labels([0, 3, 5, 7, 9, 19])
shifted = SimilarityMatrix(rows + np.array([[0.3], [-2.0], [5.0], [0.0], [1.5], [-0.7]])).with_labels([0, 3, 5, 7, 9, 19])
check("softmax_shift_invariance",
      abs(info_nce(base, 0.07).info_nce - info_nce(shifted, 0.07).info_nce) < 1e-9)


# ── 7. Geodesic vs cosine mining ────────────────────────────────────────────

print("\n=== 7. Mining A/B ===\n")

side_a, side_b, _ = paired_strands(n=2048)
ab_config = RunConfig(capacity=2048, layers=2, clusters=96, sub_clusters=8, neighbors=8, rebuild_period=50, seed=0)
geo_run = run_simulation(ab_config, side_a.points, side_b.points, 200, 32, SimilarityMetric.geodesic)
cos_run = run_simulation(ab_config, side_a.points, side_b.points, 200, 32, SimilarityMetric.cosine)
print(f"  INFO: mean rank geodesic={geo_run.summary.mean_rank:.2f} cosine={cos_run.summary.mean_rank:.2f}")
check("geodesic_lower_mean_rank", geo_run.summary.mean_rank < cos_run.summary.mean_rank)
check("geodesic_rebuild_schedule", geo_run.summary.rebuild_steps == [50, 100, 150, 200],
      str(geo_run.summary.rebuild_steps))
check("cosine_run_never_rebuilds", cos_run.summary.rebuild_steps == [])


# ── 8. Serialisation ────────────────────────────────────────────────────────

print("\n=== 8. Serialisation ===\n")

tmp = tempfile.TemporaryDirectory()
P = unit_points(600, 12, seed=8)
idx = build_index(P, HierarchyConfig(layers=2, clusters_per_node=24, sub_clusters=4, neighbors=6), seed=8)
index_path = os.path.join(tmp.name, "a.geox")
write_index(index_path, idx)
loaded, _, _ = read_index(index_path)
pairs = sample_pairs(600, 100, seed=8)
check("index_round_trip_100_queries",
      all(query_in_pool(idx, i, j).angle_sum == query_in_pool(loaded, i, j).angle_sum
          or (math.isinf(query_in_pool(idx, i, j).angle_sum) and math.isinf(query_in_pool(loaded, i, j).angle_sum))
          for i, j in pairs))

blobs = gen_sphere_blobs(4, 50, 0.05, 12, seed=9)
emb_path = os.path.join(tmp.name, "b.emb")
write_embeddings(emb_path, blobs.points, blobs.metadata())
back, meta = read_embeddings(emb_path)
check("embedding_round_trip_post_f32", np.array_equal(back, blobs.points.astype(np.float32).astype(np.float64)))
check("embedding_metadata_round_trip", meta["labels"] == blobs.labels.tolist())


# ── 9. Determinism ──────────────────────────────────────────────────────────

print("\n=== 9. Determinism ===\n")

build_args = ["build", "--in", emb_path, "--clusters", "8", "--sub-clusters", "4", "--neighbors", "4", "--seed", "3"]
code1, _ = run_cli(*build_args, "--out", os.path.join(tmp.name, "d1.geox"))
code2, _ = run_cli(*build_args, "--out", os.path.join(tmp.name, "d2.geox"), "--threads", "4")
check("build_twice_exit_ok", code1 == 0 and code2 == 0)
check("build_byte_identical",
      sha1(os.path.join(tmp.name, "d1.geox")) == sha1(os.path.join(tmp.name, "d2.geox")))

sim_args = ["simulate", "--n", "512", "--steps", "40", "--batch", "16", "--capacity", "256",
            "--clusters", "16", "--sub-clusters", "4", "--neighbors", "4", "--rebuild-period", "10"]
log1 = os.path.join(tmp.name, "s1.jsonl")
log2 = os.path.join(tmp.name, "s2.jsonl")
code1, summary1 = run_cli(*sim_args, "--log", log1)
code2, summary2 = run_cli(*sim_args, "--log", log2)
check("simulate_twice_exit_ok", code1 == 0 and code2 == 0)
check("simulate_logs_identical_without_timings", traces_equal(load_trace(log1), load_trace(log2)))
check("simulate_summaries_identical", summary1 == summary2)

distinct = gen_sphere_blobs(2, 5, 0.0, 4, seed=10)
centers = np.asarray(distinct.params["centers"])
check("zero_spread_blobs_are_centres",
      float(np.max(np.abs(distinct.points - centers[distinct.labels]))) < 1e-12)

tmp.cleanup()
print(f"\n  INFO: acceptance runtime {time.monotonic() - started:.1f}s")


# ── Summary ─────────────────────────────────────────────────────────────────

print(f"\n{'=' * 40}")
print(f"TOTAL: {passed} passed, {failed} failed")
if failed == 0:
    print("All tests passed!")
else:
    print(f"FAILURES DETECTED: {failed}")
    sys.exit(1)
