"""Hierarchical index: k-means, layered build, queries and D_o.

Covers:
  - Deterministic k-means with exact identity clustering at k == n
  - Flat configuration reproduces the exact graph geodesic bit for bit
  - In-pool queries: symmetry, self-distance, agreement with query_all
  - Out-of-graph queries and the D_o decomposition
  - Leaf clusters answer same-leaf pairs with the trivial metric
  - Clamping warnings, parent-layer fallback, raw input projected under cosine
  - Threaded builds are identical to serial ones

Run: python tests/test_hierarchy.py
"""

import math
import os
import sys

# Ensure project root on path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from core.clustering import ClusteringError, kmeans
from core.hierarchy import (
    IndexBuildError,
    QueryIndexError,
    build_index,
    build_stats,
    check_d_o,
    nearest_bottom_center,
    nearest_bottom_centers,
    query_all,
    query_in_pool,
    query_out_of_graph,
    sample_pairs,
)
from core.metrics import normalize_rows, pairwise_distances, trivial_distance
from core.oracle import exact_geodesic
from core.run_config import HierarchyConfig
from schemas import CenterMode, MetricKind

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


def raises(exc_type, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc_type:
        return True
    return False


def unit_points(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return normalize_rows(rng.standard_normal((n, dim)))


def blob(center, count: int, spread: float, rng) -> np.ndarray:
    c = np.asarray(center, dtype=np.float64)
    return normalize_rows(c / np.linalg.norm(c) + spread * rng.standard_normal((count, len(c))))


# ── 1. K-Means ──────────────────────────────────────────────────────────────

print("\n=== 1. K-Means ===\n")

X = unit_points(200, 8, seed=1)
km1 = kmeans(X, 10, 5, seed=3)
km2 = kmeans(X, 10, 5, seed=3)
check("kmeans_deterministic",
      np.array_equal(km1.centers, km2.centers) and np.array_equal(km1.assignment, km2.assignment))
check("kmeans_no_empty_clusters", bool(np.all(np.bincount(km1.assignment, minlength=10) > 0)))
check("kmeans_cosine_centres_unit",
      bool(np.all(np.abs(np.linalg.norm(km1.centers, axis=1) - 1.0) < 1e-9)))

ident = kmeans(X[:30], 30, 5, seed=0)
check("kmeans_k_equals_n_identity",
      np.array_equal(ident.centers, X[:30]) and np.array_equal(ident.assignment, np.arange(30)))
check("kmeans_k_too_large_rejected", raises(ClusteringError, kmeans, X[:5], 6, 5, 0))
check("kmeans_empty_rejected", raises(ClusteringError, kmeans, np.zeros((0, 3)), 1, 5, 0, MetricKind.euclidean))

med = kmeans(X, 10, 5, seed=3, center_mode=CenterMode.medoid)
check("medoid_centres_are_points",
      all(bool(np.any(np.all(X == c, axis=1))) for c in med.centers))

dup = np.repeat(unit_points(3, 4, seed=9), 10, axis=0)
km_dup = kmeans(dup, 6, 5, seed=0)
check("duplicate_points_no_empty_cluster",
      bool(np.all(np.bincount(km_dup.assignment, minlength=6) > 0)))


# ── 2. Flat equivalence ─────────────────────────────────────────────────────

print("\n=== 2. Flat Equivalence ===\n")

flat_ok = True
for trial, n in enumerate([64, 128]):
    P = unit_points(n, 16, seed=20 + trial)
    cfg = HierarchyConfig(layers=1, clusters_per_node=n, neighbors=8)
    idx = build_index(P, cfg, seed=trial)
    exact = exact_geodesic(P, 8, MetricKind.cosine)
    flat_ok &= idx.flat_equivalent and np.array_equal(query_all(idx), exact.dist)
check("flat_index_equals_exact_geodesic", flat_ok)

P64 = unit_points(64, 16, seed=30)
flat = build_index(P64, HierarchyConfig(layers=1, clusters_per_node=64, neighbors=8))
check("flat_out_of_graph_equals_in_pool",
      all(query_out_of_graph(flat, P64[i], j).angle_sum == query_in_pool(flat, j, i).angle_sum
          for i, j in sample_pairs(64, 50, seed=1)))


# ── 3. Two-layer queries ────────────────────────────────────────────────────

print("\n=== 3. Two-Layer Queries ===\n")

P = unit_points(400, 16, seed=40)
cfg = HierarchyConfig(layers=2, clusters_per_node=16, sub_clusters=6, neighbors=4)
idx = build_index(P, cfg, seed=5)
H = query_all(idx)

check("two_layer_has_more_bottom_centres", len(idx.bottom_centers) > 16, str(len(idx.bottom_centers)))
check("query_all_exactly_symmetric", np.array_equal(H, H.T))
check("query_all_zero_diagonal", bool(np.all(np.diag(H) == 0.0)))

pairs = sample_pairs(400, 300, seed=2)
check("query_in_pool_matches_query_all",
      all(query_in_pool(idx, i, j).angle_sum == H[i, j] or
          (math.isinf(H[i, j]) and math.isinf(query_in_pool(idx, i, j).angle_sum))
          for i, j in pairs))
check("query_in_pool_symmetric",
      all(query_in_pool(idx, i, j).angle_sum == query_in_pool(idx, j, i).angle_sum for i, j in pairs))

self_q = query_in_pool(idx, 7, 7)
check("self_distance_zero", self_q.angle_sum == 0.0 and self_q.reachable)
check("out_of_range_rejected", raises(QueryIndexError, query_in_pool, idx, 0, 400))
check("negative_index_rejected", raises(QueryIndexError, query_in_pool, idx, -1, 3))
try:
    query_in_pool(idx, 0, 999)
    check("query_error_carries_size", False, "no error")
except QueryIndexError as e:
    check("query_error_carries_size", e.index == 999 and e.size == 400)

check("d_o_decomposition_exact",
      check_d_o(idx, idx.d_o, idx.point_to_bottom_center, idx.point_to_bottom_dist) == 0)
check("climb_bottom_is_bottom_distance", np.array_equal(idx.climb[:, -1], idx.point_to_bottom_dist))
check("climb_non_decreasing_upwards", bool(np.all(idx.climb[:, 0] >= idx.climb[:, 1])))

x_new = unit_points(1, 16, seed=41)[0]
c, d = nearest_bottom_center(idx, x_new)
r = query_out_of_graph(idx, x_new, 12)
check("out_of_graph_decomposition", r.angle_sum == d + idx.d_o[12, c])
check("out_of_graph_bad_target_rejected", raises(QueryIndexError, query_out_of_graph, idx, x_new, 400))

check("hierarchical_never_below_trivial", bool(np.all(H >= pairwise_distances(P) - 1e-9)))

Q = unit_points(1000, 16, seed=43)
near_c, near_d = nearest_bottom_centers(idx, Q)
brute = np.array([[trivial_distance(q, c) for c in idx.bottom_centers] for q in Q])
check("nearest_centre_matches_brute_force",
      np.array_equal(near_c, np.argmin(brute, axis=1)) and np.array_equal(near_d, brute.min(axis=1)))

twins = unit_points(30, 8, seed=44)
twins[17] = twins[4]
twin_idx = build_index(twins, HierarchyConfig(layers=1, clusters_per_node=30, neighbors=3))
check("nearest_centre_tie_goes_to_lowest_index",
      nearest_bottom_center(twin_idx, twins[17]) == (4, 0.0))

stats = build_stats(idx, 1.0)
top = stats.layers[0]
check("build_stats_layer_count", len(stats.layers) == 2)
check("top_components_within_theorem1", stats.component_count <= stats.theorem1_bound)
check("top_layer_single_group", top.group_count == 1)


# ── 4. Structure details ────────────────────────────────────────────────────

print("\n=== 4. Structure ===\n")

P100 = unit_points(100, 8, seed=50)
leafy = build_index(P100, HierarchyConfig(layers=2, clusters_per_node=20, neighbors=8, leaf_size_threshold=100), seed=1)
check("small_clusters_pass_through",
      leafy.layers[1].center_count == 20 and np.array_equal(leafy.layers[1].centers, leafy.layers[0].centers))
check("pass_through_flagged_leaf", bool(leafy.layers[0].leaf.all() and leafy.bottom.leaf.all()))

leafy_all = query_all(leafy)
leafy_pairs = [(i, j) for i in range(100) for j in range(i + 1, 100)
               if leafy.bottom.assignment[i] == leafy.bottom.assignment[j]]
check("same_leaf_pairs_exist", len(leafy_pairs) > 0)
check("same_leaf_query_is_trivial",
      all(query_in_pool(leafy, i, j).angle_sum == trivial_distance(P100[i], P100[j]) for i, j in leafy_pairs))
check("same_leaf_query_all_is_trivial",
      all(leafy_all[i, j] == trivial_distance(P100[i], P100[j]) for i, j in leafy_pairs))
check("leaf_query_all_symmetric", np.array_equal(leafy_all, leafy_all.T))

# σ = 4 gives a leaf threshold of 9; 200 points over 20 clusters leave
# some clusters at or below it and some above.
P200 = unit_points(200, 8, seed=51)
mixed = build_index(P200, HierarchyConfig(layers=2, clusters_per_node=20, sub_clusters=4, neighbors=4), seed=3)
top_sizes = np.bincount(mixed.layers[0].assignment, minlength=20)
check("leaf_flag_follows_threshold", np.array_equal(mixed.layers[0].leaf, top_sizes <= 9))
mixed_all = query_all(mixed)
mixed_pairs = [(i, j) for i in range(200) for j in range(i + 1, 200)
               if mixed.bottom.assignment[i] == mixed.bottom.assignment[j]
               and mixed.bottom.leaf[mixed.bottom.assignment[i]]]
check("mixed_index_has_leaf_pairs", len(mixed_pairs) > 0)
check("mixed_same_leaf_is_trivial",
      all(query_in_pool(mixed, i, j).angle_sum == trivial_distance(P200[i], P200[j]) == mixed_all[i, j]
          for i, j in mixed_pairs))

clamped = build_index(P100, HierarchyConfig(layers=1, clusters_per_node=500, neighbors=4))
check("cluster_count_clamped", clamped.layers[0].center_count == 100)
check("clamp_recorded_as_warning", any("clamped" in w for w in clamped.warnings), str(clamped.warnings))

check("empty_point_set_rejected",
      raises(IndexBuildError, build_index, np.zeros((0, 8)), HierarchyConfig(), 0))

scaled = 2.5 * P100 + 0.1
raw_idx = build_index(scaled, HierarchyConfig(layers=2, clusters_per_node=10, neighbors=4), seed=1)
unit_idx = build_index(normalize_rows(scaled), HierarchyConfig(layers=2, clusters_per_node=10, neighbors=4), seed=1)
check("raw_input_projected_under_cosine",
      np.array_equal(raw_idx.points, unit_idx.points) and np.array_equal(raw_idx.d_o, unit_idx.d_o))

again = build_index(P, cfg, seed=5)
check("build_deterministic", np.array_equal(again.d_o, idx.d_o) and np.array_equal(again.climb, idx.climb))
threaded = build_index(P, cfg, seed=5, threads=4)
check("threaded_build_identical", np.array_equal(threaded.d_o, idx.d_o))


# ── 5. Disconnection ────────────────────────────────────────────────────────

print("\n=== 5. Disconnection ===\n")

rng = np.random.Generator(np.random.Philox(60))
far_a = blob([1.0, 0.0, 0.0], 20, 0.01, rng)
far_b = blob([0.0, 1.0, 0.0], 20, 0.01, rng)
split = build_index(np.vstack([far_a, far_b]), HierarchyConfig(layers=1, clusters_per_node=40, neighbors=3))
cross = query_in_pool(split, 0, 25)
check("cross_component_unreachable", math.isinf(cross.angle_sum) and not cross.reachable)
check("within_component_reachable", query_in_pool(split, 0, 5).reachable)

# One top centre; four tight blobs in two far-apart pairs, σ=1 among the
# children, so the child graph splits and cross-pair queries climb to the top.
quad = np.vstack([
    blob([1.0, 0.0, 0.0], 15, 0.002, rng),
    blob([1.0, 0.05, 0.0], 15, 0.002, rng),
    blob([0.0, 1.0, 0.0], 15, 0.002, rng),
    blob([0.05, 1.0, 0.0], 15, 0.002, rng),
])
nested = build_index(quad, HierarchyConfig(layers=2, clusters_per_node=1, sub_clusters=4, neighbors=1), seed=2)
child_components = build_stats(nested).layers[1].component_count
before = nested.stats.snapshot()["parent_fallbacks"]
fallback = query_in_pool(nested, 0, 40)
check("child_graph_split", child_components == 2, str(child_components))
check("parent_fallback_reachable", fallback.reachable)
check("parent_fallback_uses_top_layer",
      fallback.angle_sum == 0.0 + (nested.climb[0, 0] + nested.climb[40, 0]))
check("parent_fallback_counted", nested.stats.snapshot()["parent_fallbacks"] == before + 1)


# ── Summary ─────────────────────────────────────────────────────────────────

print(f"\n{'=' * 40}")
print(f"TOTAL: {passed} passed, {failed} failed")
if failed == 0:
    print("All tests passed!")
else:
    print(f"FAILURES DETECTED: {failed}")
    sys.exit(1)
