"""Hierarchical Geodesic Index — layered K-Means centre graphs with APSP.

Structure (layer 0 is the top):
  - Layer 0 clusters every point; its centres form one k-NN graph.
  - Layer l+1 re-clusters the points of each layer-l centre separately;
    the children of one parent form their own graph ("group"). A parent at
    or below the leaf threshold is a leaf: it gets a single pass-through
    child, and two points sharing a leaf are measured with the trivial
    metric directly.
  - Every graph carries a Floyd distance matrix.

Distances decompose through the layers:
  - climb[x, bottom] = d_t(x, C_bottom(x))
  - climb[x, l]      = climb[x, l+1] + up_cost(C_{l+1}(x))
  - up_cost(child)   = d_g(child, anchor) + d_t(anchor, parent), where the
    anchor is the child nearest to the parent centre
  - d(x_i, x_j)      = d_g(C_s(x_i), C_s(x_j)) + climb[i, s] + climb[j, s]
    at the deepest layer s where both centres share a group

Out-of-graph queries go through D_o, the distance from every indexed point
to every bottom centre: D_o[i, c] = climb[i, bottom] + B[K[i], c], with B
the hierarchical distance between bottom centres.
"""

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.clustering import kmeans
from core.graph import (
    KnnGraph,
    build_knn_graph,
    empty_graph,
    floyd_apsp,
    theorem1_bound,
    connected_components,
)
from core.metrics import (
    ArrayLike,
    as_feature_matrix,
    as_feature_vector,
    ingest_points,
    paired_distances,
    pairwise_distances,
)
from core.parallel import map_ordered
from core.run_config import HierarchyConfig
from core.structured_logger import EventType, log_event
from schemas import BuildStats, LayerStats

logger = logging.getLogger(__name__)

NO_PARENT = -1


class IndexBuildError(ValueError):
    """Raised when an index cannot be built from the given points."""


class QueryIndexError(IndexError):
    """Raised for point indices outside the indexed range."""

    def __init__(self, index: int, size: int):
        self.index = index
        self.size = size
        super().__init__(f"point index {index} out of range [0, {size})")


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class GeodesicResult:
    angle_sum: float
    reachable: bool

    @classmethod
    def of(cls, value: float) -> "GeodesicResult":
        return cls(float(value), bool(math.isfinite(value)))


@dataclass(eq=False)
class CenterGroup:
    """One centre graph: the children of a single parent (or the whole top)."""

    parent: int
    members: np.ndarray    # centre indices within the layer, ascending
    graph: KnnGraph        # node ids are positions in ``members``
    apsp: np.ndarray


@dataclass(eq=False)
class Layer:
    centers: np.ndarray            # (m, dim)
    assignment: np.ndarray         # (n_points,) point -> centre
    parent: np.ndarray             # (m,) centre -> parent centre; identity at the top
    groups: List[CenterGroup]
    group_of_center: np.ndarray    # (m,)
    local_index: np.ndarray        # (m,) position inside its group
    anchor_child: np.ndarray       # (m,) nearest child centre, -1 at the bottom
    anchor_dist: np.ndarray        # (m,) d_t(centre, anchor child)
    up_cost: np.ndarray            # (m,) cost of climbing to the parent, 0 at the top
    up_fallback: np.ndarray        # (m,) bool, child and anchor disconnected
    leaf: np.ndarray               # (m,) bool, members not re-clustered below

    @property
    def center_count(self) -> int:
        return len(self.centers)

    @property
    def center_graph(self) -> KnnGraph:
        """The layer's graph when it has a single group (always at the top)."""
        return self.groups[0].graph

    @property
    def center_apsp(self) -> np.ndarray:
        return self.groups[0].apsp


class QueryStats:
    """Thread-safe counters for query-time events."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.in_pool_queries = 0
        self.out_of_graph_queries = 0
        self.parent_fallbacks = 0
        self.unreachable = 0

    def record(self, field_name: str, amount: int = 1) -> None:
        with self._lock:
            setattr(self, field_name, getattr(self, field_name) + amount)

    def snapshot(self) -> Dict[str, int]:
        with self._lock:
            return {
                "in_pool_queries": self.in_pool_queries,
                "out_of_graph_queries": self.out_of_graph_queries,
                "parent_fallbacks": self.parent_fallbacks,
                "unreachable": self.unreachable,
            }


@dataclass(eq=False)
class HierarchicalIndex:
    config: HierarchyConfig
    layers: List[Layer]
    climb: np.ndarray                  # (n, L)
    point_to_bottom_center: np.ndarray  # K
    point_to_bottom_dist: np.ndarray
    bottom_center_dist: np.ndarray     # B, (nb, nb)
    d_o: np.ndarray                    # (n, nb)
    points: np.ndarray                 # (n, dim) as indexed, unit rows under cosine
    warnings: List[str] = field(default_factory=list)
    warmup: bool = False
    stats: QueryStats = field(default_factory=QueryStats)

    @property
    def point_count(self) -> int:
        return len(self.point_to_bottom_center)

    @property
    def dim(self) -> int:
        return int(self.layers[0].centers.shape[1])

    @property
    def bottom(self) -> Layer:
        return self.layers[-1]

    @property
    def bottom_centers(self) -> np.ndarray:
        return self.layers[-1].centers

    @property
    def flat_equivalent(self) -> bool:
        return len(self.layers) == 1 and self.layers[0].center_count == self.point_count

    def check_point(self, i: int) -> int:
        if not 0 <= int(i) < self.point_count:
            raise QueryIndexError(int(i), self.point_count)
        return int(i)


# ---------------------------------------------------------------------------
# Build helpers
# ---------------------------------------------------------------------------
def _derive_seed(seed: int, layer: int, parent: int) -> int:
    return int(np.random.SeedSequence([int(seed), layer, parent + 1]).generate_state(1)[0])


def _group_graph(centers: np.ndarray, cfg: HierarchyConfig) -> Tuple[KnnGraph, np.ndarray]:
    m = len(centers)
    sigma = min(cfg.neighbors, m - 1)
    if sigma < 1 and cfg.epsilon is None:
        g = empty_graph(m, 0)
    else:
        g = build_knn_graph(centers, sigma, cfg.metric, epsilon=cfg.epsilon)
    return g, floyd_apsp(g, cfg.floyd_block)


@dataclass
class _ChildBuild:
    centers: np.ndarray
    local_assignment: np.ndarray   # per member point, index into ``centers``
    graph: KnnGraph
    apsp: np.ndarray
    clamped: Optional[str] = None
    leaf: bool = False


def _build_children(
    X: np.ndarray,
    members: np.ndarray,
    parent_center: np.ndarray,
    cfg: HierarchyConfig,
    seed: int,
) -> _ChildBuild:
    size = len(members)
    clamped = None
    if size > cfg.leaf_threshold:
        k = min(cfg.sub_clusters, size - 1)
        if k < cfg.sub_clusters:
            clamped = f"sub_clusters clamped from {cfg.sub_clusters} to {k} for a cluster of {size}"
        centers, local = kmeans(X[members], k, cfg.kmeans_iters, seed, cfg.metric, cfg.center_mode)
    else:
        centers = parent_center[None, :].copy()
        local = np.zeros(size, dtype=np.int64)
    graph, apsp = _group_graph(centers, cfg)
    return _ChildBuild(centers, local, graph, apsp, clamped, leaf=size <= cfg.leaf_threshold)


def _finish_layer(
    centers: np.ndarray,
    assignment: np.ndarray,
    parent: np.ndarray,
    groups: List[CenterGroup],
) -> Layer:
    m = len(centers)
    group_of_center = np.zeros(m, dtype=np.int64)
    local_index = np.zeros(m, dtype=np.int64)
    for gi, grp in enumerate(groups):
        group_of_center[grp.members] = gi
        local_index[grp.members] = np.arange(len(grp.members))
    return Layer(
        centers=centers,
        assignment=assignment,
        parent=parent,
        groups=groups,
        group_of_center=group_of_center,
        local_index=local_index,
        anchor_child=np.full(m, -1, dtype=np.int64),
        anchor_dist=np.zeros(m),
        up_cost=np.zeros(m),
        up_fallback=np.zeros(m, dtype=bool),
        leaf=np.zeros(m, dtype=bool),
    )


def _link_layers(upper: Layer, lower: Layer, cfg: HierarchyConfig) -> None:
    """Anchor children and climbing costs from ``lower`` into ``upper``."""
    for p in range(upper.center_count):
        grp = lower.groups[p]
        kids = grp.members
        d_to_parent = pairwise_distances(lower.centers[kids], upper.centers[p:p + 1], cfg.metric)[:, 0]
        a_local = int(np.argmin(d_to_parent))
        upper.anchor_child[p] = kids[a_local]
        upper.anchor_dist[p] = d_to_parent[a_local]
        via_anchor = grp.apsp[:, a_local]
        connected = np.isfinite(via_anchor)
        lower.up_cost[kids] = np.where(connected, via_anchor + d_to_parent[a_local], d_to_parent)
        lower.up_fallback[kids] = ~connected


def _climb_table(X: np.ndarray, layers: List[Layer], kind) -> np.ndarray:
    n = len(X)
    L = len(layers)
    climb = np.zeros((n, L))
    bottom = layers[-1]
    climb[:, L - 1] = paired_distances(X, bottom.centers[bottom.assignment], kind)
    for l in range(L - 2, -1, -1):
        below = layers[l + 1]
        climb[:, l] = climb[:, l + 1] + below.up_cost[below.assignment]
    return climb


def _ancestors(layers: List[Layer]) -> List[np.ndarray]:
    """For each bottom centre, its centre index at every layer."""
    L = len(layers)
    anc: List[np.ndarray] = [np.zeros(0, dtype=np.int64)] * L
    anc[L - 1] = np.arange(layers[-1].center_count, dtype=np.int64)
    for l in range(L - 2, -1, -1):
        anc[l] = layers[l + 1].parent[anc[l + 1]]
    return anc


def _bottom_climb(layers: List[Layer], anc: List[np.ndarray]) -> np.ndarray:
    L = len(layers)
    climb = np.zeros((layers[-1].center_count, L))
    for l in range(L - 2, -1, -1):
        climb[:, l] = climb[:, l + 1] + layers[l + 1].up_cost[anc[l + 1]]
    return climb


def _pairwise_hierarchical(
    layers: List[Layer],
    assign: List[np.ndarray],
    climb: np.ndarray,
) -> Tuple[np.ndarray, int]:
    """Full distance matrix for items with the given per-layer centres.

    Returns the matrix and the number of unordered pairs that had to fall
    back to a parent layer.
    """
    n = len(climb)
    out = np.full((n, n), np.inf)
    resolved = np.zeros((n, n), dtype=bool)
    fallbacks = 0
    for l in range(len(layers) - 1, -1, -1):
        layer = layers[l]
        centers = assign[l]
        g_of = layer.group_of_center[centers]
        loc = layer.local_index[centers]
        for g in np.unique(g_of):
            idx = np.flatnonzero(g_of == g)
            block = np.ix_(idx, idx)
            sub = layer.groups[int(g)].apsp[np.ix_(loc[idx], loc[idx])]
            c = climb[idx, l]
            vals = sub + (c[:, None] + c[None, :])
            open_ = ~resolved[block]
            finite = np.isfinite(sub)
            take = open_ & finite
            if l > 0:
                fallbacks += int(np.count_nonzero(open_ & ~finite)) // 2
            current = out[block]
            current[take] = vals[take]
            out[block] = current
            resolved[block] = resolved[block] | take
    np.fill_diagonal(out, 0.0)
    return out, fallbacks


# ---------------------------------------------------------------------------
# Build
# ---------------------------------------------------------------------------
def build_index(
    points: ArrayLike,
    config: HierarchyConfig,
    seed: int = 0,
    threads: int = 1,
    warmup: bool = False,
) -> HierarchicalIndex:
    """Build the layered structure, the climb table, K and D_o.

    An infeasible cluster count is clamped to the population and recorded
    in ``warnings`` instead of raising.
    """
    X = ingest_points(points, config.metric)
    n = len(X)
    if n == 0:
        raise IndexBuildError("cannot index an empty point set")
    start = time.monotonic()
    warnings: List[str] = []
    log_event(logger, logging.DEBUG, EventType.BUILD_START, "index build started",
              points=n, **config.to_trace_dict())

    k_top = config.clusters_per_node
    if k_top > n:
        warnings.append(f"clusters_per_node clamped from {k_top} to {n} (point count)")
        log_event(logger, logging.WARNING, EventType.CONFIG_CLAMPED, warnings[-1],
                  requested=k_top, points=n)
        k_top = n

    centers, assignment = kmeans(X, k_top, config.kmeans_iters, _derive_seed(seed, 0, NO_PARENT),
                                 config.metric, config.center_mode)
    graph, apsp = _group_graph(centers, config)
    top = _finish_layer(
        centers, assignment, np.arange(len(centers), dtype=np.int64),
        [CenterGroup(NO_PARENT, np.arange(len(centers), dtype=np.int64), graph, apsp)],
    )
    layers: List[Layer] = [top]
    log_event(logger, logging.DEBUG, EventType.LAYER_BUILT, "layer built",
              layer=0, centers=len(centers), edges=graph.edge_count)

    for l in range(1, config.layers):
        upper = layers[-1]
        member_lists = [np.flatnonzero(upper.assignment == p) for p in range(upper.center_count)]

        def build_one(p: int, _l: int = l, _upper: Layer = upper, _members=member_lists) -> _ChildBuild:
            return _build_children(X, _members[p], _upper.centers[p], config, _derive_seed(seed, _l, p))

        children = map_ordered(build_one, list(range(upper.center_count)), threads, label=f"layer{l}")

        all_centers: List[np.ndarray] = []
        parent: List[np.ndarray] = []
        groups: List[CenterGroup] = []
        point_assign = np.zeros(n, dtype=np.int64)
        offset = 0
        for p, child in enumerate(children):
            m = len(child.centers)
            ids = np.arange(offset, offset + m, dtype=np.int64)
            all_centers.append(child.centers)
            parent.append(np.full(m, p, dtype=np.int64))
            groups.append(CenterGroup(p, ids, child.graph, child.apsp))
            point_assign[member_lists[p]] = offset + child.local_assignment
            if child.clamped:
                warnings.append(f"layer {l} parent {p}: {child.clamped}")
            upper.leaf[p] = child.leaf
            offset += m

        layer = _finish_layer(np.vstack(all_centers), point_assign, np.concatenate(parent), groups)
        layer.leaf[:] = upper.leaf[layer.parent]
        _link_layers(upper, layer, config)
        layers.append(layer)
        fallbacks = int(layer.up_fallback.sum())
        if fallbacks:
            warnings.append(f"layer {l}: {fallbacks} centres climb by direct distance (disconnected from anchor)")
        log_event(logger, logging.DEBUG, EventType.LAYER_BUILT, "layer built",
                  layer=l, centers=layer.center_count, groups=len(groups), up_cost_fallbacks=fallbacks)

    climb = _climb_table(X, layers, config.metric)
    anc = _ancestors(layers)
    B, _ = _pairwise_hierarchical(layers, anc, _bottom_climb(layers, anc))
    K = layers[-1].assignment.copy()
    bottom_dist = climb[:, -1].copy()
    d_o = bottom_dist[:, None] + B[K]

    idx = HierarchicalIndex(
        config=config,
        layers=layers,
        climb=climb,
        point_to_bottom_center=K,
        point_to_bottom_dist=bottom_dist,
        bottom_center_dist=B,
        d_o=d_o,
        points=X,
        warnings=warnings,
        warmup=warmup,
    )
    elapsed = (time.monotonic() - start) * 1000
    log_event(logger, logging.INFO, EventType.BUILD_COMPLETE, "index built",
              points=n, layers=len(layers), bottom_centers=len(B),
              warmup=warmup, latency_ms=elapsed)
    return idx


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------
def _share_leaf(idx: HierarchicalIndex, i: int, j: int) -> bool:
    bottom = idx.bottom
    c = int(bottom.assignment[i])
    return c == int(bottom.assignment[j]) and bool(bottom.leaf[c])


def query_in_pool(idx: HierarchicalIndex, i: int, j: int) -> GeodesicResult:
    """Hierarchical geodesic between two indexed points; exactly symmetric."""
    i = idx.check_point(i)
    j = idx.check_point(j)
    idx.stats.record("in_pool_queries")
    if i == j:
        return GeodesicResult(0.0, True)
    if _share_leaf(idx, i, j):
        return GeodesicResult.of(
            float(pairwise_distances(idx.points[i:i + 1], idx.points[j:j + 1], idx.config.metric)[0, 0])
        )
    for l in range(len(idx.layers) - 1, -1, -1):
        layer = idx.layers[l]
        ci = int(layer.assignment[i])
        cj = int(layer.assignment[j])
        gi = int(layer.group_of_center[ci])
        if gi != int(layer.group_of_center[cj]):
            continue
        dg = layer.groups[gi].apsp[layer.local_index[ci], layer.local_index[cj]]
        if math.isfinite(dg):
            return GeodesicResult.of(dg + (idx.climb[i, l] + idx.climb[j, l]))
        if l > 0:
            idx.stats.record("parent_fallbacks")
            log_event(logger, logging.DEBUG, EventType.PARENT_FALLBACK,
                      "centres disconnected inside their group, using parent layer",
                      layer=l, i=i, j=j)
    idx.stats.record("unreachable")
    return GeodesicResult(math.inf, False)


def query_all(idx: HierarchicalIndex) -> np.ndarray:
    """(n, n) matrix of query_in_pool values."""
    assign = [layer.assignment for layer in idx.layers]
    out, fallbacks = _pairwise_hierarchical(idx.layers, assign, idx.climb)
    if fallbacks:
        idx.stats.record("parent_fallbacks", fallbacks)
    bottom = idx.bottom
    for c in np.flatnonzero(bottom.leaf):
        members = np.flatnonzero(bottom.assignment == c)
        if len(members) > 1:
            out[np.ix_(members, members)] = pairwise_distances(idx.points[members], kind=idx.config.metric)
    return out


def nearest_bottom_centers(idx: HierarchicalIndex, X: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised nearest bottom centre per row; ties go to the lowest index."""
    Q = as_feature_matrix(X, dim=idx.dim, kind=idx.config.metric)
    D = pairwise_distances(Q, idx.bottom_centers, idx.config.metric)
    c = np.argmin(D, axis=1).astype(np.int64)
    return c, D[np.arange(len(Q)), c]


def nearest_bottom_center(idx: HierarchicalIndex, x_o: ArrayLike) -> Tuple[int, float]:
    v = as_feature_vector(x_o, dim=idx.dim, kind=idx.config.metric)
    c, d = nearest_bottom_centers(idx, v[None, :])
    return int(c[0]), float(d[0])


def query_out_of_graph(
    idx: HierarchicalIndex,
    x_o: ArrayLike,
    i: int,
    d_o: Optional[np.ndarray] = None,
) -> GeodesicResult:
    """d(x_o, nearest bottom centre) + D_o[i, that centre].

    ``d_o`` defaults to the index's own table; a pool passes its live rows.
    """
    table = idx.d_o if d_o is None else d_o
    if not 0 <= int(i) < len(table):
        raise QueryIndexError(int(i), len(table))
    idx.stats.record("out_of_graph_queries")
    c, d = nearest_bottom_center(idx, x_o)
    return GeodesicResult.of(d + table[int(i), c])


# ---------------------------------------------------------------------------
# Introspection
# ---------------------------------------------------------------------------
def build_stats(idx: HierarchicalIndex, build_ms: float = 0.0) -> BuildStats:
    layer_stats: List[LayerStats] = []
    for l, layer in enumerate(idx.layers):
        comps = 0
        bound = 0.0
        edges = 0
        for grp in layer.groups:
            comps += connected_components(grp.graph).component_count
            edges += grp.graph.edge_count
            bound += theorem1_bound(grp.graph.node_count, max(1, grp.graph.neighbor_count))
        layer_stats.append(LayerStats(
            layer=l,
            center_count=layer.center_count,
            group_count=len(layer.groups),
            edge_count=edges,
            component_count=comps,
            theorem1_bound=bound,
            up_cost_fallbacks=int(layer.up_fallback.sum()),
        ))
    top_graph = idx.layers[0].center_graph
    top_components = connected_components(top_graph).component_count
    top_bound = theorem1_bound(top_graph.node_count, max(1, top_graph.neighbor_count))
    return BuildStats(
        point_count=idx.point_count,
        dim=idx.dim,
        bottom_center_count=len(idx.bottom_centers),
        flat_equivalent=idx.flat_equivalent,
        component_count=top_components,
        theorem1_bound=top_bound,
        theorem1_margin=top_bound - top_components,
        layers=layer_stats,
        warnings=list(idx.warnings),
        build_ms=round(build_ms, 2),
    )


def check_d_o(idx: HierarchicalIndex, d_o: np.ndarray, K: np.ndarray, dist: np.ndarray) -> int:
    """Rows violating d_o[i, c] == dist[i] + B[K[i], c] exactly."""
    if len(K) == 0:
        return 0
    expected = dist[:, None] + idx.bottom_center_dist[K]
    same = (d_o == expected) | (np.isinf(d_o) & np.isinf(expected))
    return int(np.count_nonzero(~same.all(axis=1)))


def sample_pairs(n: int, count: int, seed: int) -> Sequence[Tuple[int, int]]:
    rng = np.random.Generator(np.random.Philox(seed))
    pairs = rng.integers(0, n, size=(count, 2))
    return [(int(a), int(b)) for a, b in pairs]
