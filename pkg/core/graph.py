"""Neighbour Graphs — k-NN construction, all-pairs shortest paths, connectivity.

Provides:
  - KnnGraph: undirected weighted graph, each edge stored once with src < dst
  - build_knn_graph(): exact brute-force k-NN graph (union symmetrisation),
    optionally widened by an ε-threshold
  - floyd_apsp(): cache-blocked Floyd-Warshall over a dense matrix
  - dijkstra_apsp(): independent multi-source Dijkstra (scipy.sparse.csgraph)
  - connected_components() / component_labels()
  - theorem1_bound(), theorem2_bounds(), validate_bounds(): closed-form
    limits on component count and edge count, checked against a graph

Unreachable pairs are +inf, never a large finite stand-in.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc
from scipy.sparse.csgraph import dijkstra

from core.metrics import ArrayLike, as_feature_matrix, ingest_points, pairwise_distances
from schemas import BoundsReport, CheckStatus, ComponentReport, MetricKind

logger = logging.getLogger(__name__)

DEFAULT_FLOYD_BLOCK = 64


class GraphError(ValueError):
    """Raised for invalid graph parameters or edge lists."""


# ---------------------------------------------------------------------------
# Graph value
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class KnnGraph:
    node_count: int
    src: np.ndarray          # int64, src < dst
    dst: np.ndarray          # int64
    weight: np.ndarray       # float64, finite and >= 0
    neighbor_count: int      # σ the graph was built with
    epsilon: Optional[float] = None
    _degrees: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        deg = np.bincount(self.src, minlength=self.node_count) + np.bincount(self.dst, minlength=self.node_count)
        object.__setattr__(self, "_degrees", deg.astype(np.int64))

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges: Iterable[Tuple[int, int, float]],
        neighbor_count: int = 0,
        epsilon: Optional[float] = None,
    ) -> "KnnGraph":
        """Build from explicit (i, j, w) triples.

        Orientation is normalised to i < j; a pair listed twice keeps its
        smaller weight.
        """
        best = {}
        for i, j, w in edges:
            i, j, w = int(i), int(j), float(w)
            if not (0 <= i < node_count and 0 <= j < node_count):
                raise GraphError(f"edge ({i}, {j}) out of range for {node_count} nodes")
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (math.isfinite(w) and w >= 0):
                raise GraphError(f"edge ({i}, {j}) has invalid weight {w!r}")
            key = (i, j) if i < j else (j, i)
            if key not in best or w < best[key]:
                best[key] = w
        keys = sorted(best)
        src = np.array([k[0] for k in keys], dtype=np.int64)
        dst = np.array([k[1] for k in keys], dtype=np.int64)
        weight = np.array([best[k] for k in keys], dtype=np.float64)
        return cls(node_count, src, dst, weight, neighbor_count, epsilon)

    @property
    def edge_count(self) -> int:
        return int(len(self.src))

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    @property
    def min_degree(self) -> int:
        return int(self._degrees.min()) if self.node_count else 0

    def edges(self) -> List[Tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.src, self.dst, self.weight)]

    def has_edge(self, i: int, j: int) -> bool:
        a, b = (i, j) if i < j else (j, i)
        return bool(np.any((self.src == a) & (self.dst == b)))

    def to_dense(self) -> np.ndarray:
        """Adjacency with +inf for non-edges and 0 on the diagonal."""
        D = np.full((self.node_count, self.node_count), np.inf)
        D[self.src, self.dst] = self.weight
        D[self.dst, self.src] = self.weight
        np.fill_diagonal(D, 0.0)
        return D

    def to_csr(self, unit_weights: bool = False) -> csr_matrix:
        # Explicit zeros are kept: csgraph treats them as zero-weight edges.
        data = np.ones(2 * self.edge_count) if unit_weights else np.concatenate([self.weight, self.weight])
        rows = np.concatenate([self.src, self.dst])
        cols = np.concatenate([self.dst, self.src])
        return csr_matrix((data, (rows, cols)), shape=(self.node_count, self.node_count))


def empty_graph(node_count: int, neighbor_count: int = 0) -> KnnGraph:
    none = np.zeros(0, dtype=np.int64)
    return KnnGraph(node_count, none, none.copy(), np.zeros(0), neighbor_count)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------
def build_knn_graph(
    points: ArrayLike,
    k: int,
    kind: MetricKind = MetricKind.cosine,
    epsilon: Optional[float] = None,
) -> KnnGraph:
    """Exact k-NN graph; an edge exists if either endpoint lists the other.

    Ties in the neighbour ranking go to the lowest index. With ``epsilon``
    every pair at distance <= ε is connected as well, and k may be 0.
    """
    X = as_feature_matrix(points, kind=kind)
    n = len(X)
    if k < 0 or (k == 0 and epsilon is None):
        raise GraphError(f"k must be >= 1, got {k}")
    if k >= max(n, 1) and k > 0:
        raise GraphError(f"k={k} must be smaller than the node count {n}")
    if epsilon is not None and epsilon < 0:
        raise GraphError(f"epsilon must be >= 0, got {epsilon}")
    if n == 0:
        return empty_graph(0, k)

    D = pairwise_distances(X, kind=kind)
    mask = np.zeros((n, n), dtype=bool)
    if k > 0:
        ranked = D.copy()
        np.fill_diagonal(ranked, np.inf)
        nbrs = np.argsort(ranked, axis=1, kind="stable")[:, :k]
        mask[np.repeat(np.arange(n), k), nbrs.ravel()] = True
        mask |= mask.T
    if epsilon is not None:
        mask |= D <= epsilon
    np.fill_diagonal(mask, False)

    src, dst = np.nonzero(np.triu(mask, k=1))
    return KnnGraph(n, src.astype(np.int64), dst.astype(np.int64), D[src, dst], k, epsilon)


# ---------------------------------------------------------------------------
# All-pairs shortest paths
# ---------------------------------------------------------------------------
def floyd_apsp(g: KnnGraph, block: int = DEFAULT_FLOYD_BLOCK) -> np.ndarray:
    """Blocked Floyd-Warshall; same result as the textbook triple loop.

    Per pivot block: close the block itself, relax its row and column
    panels through it, then relax every remaining row block with a
    min-plus update.
    """
    D = g.to_dense()
    n = g.node_count
    if n <= 1:
        return D
    block = max(1, int(block))

    for kb in range(0, n, block):
        ke = min(kb + block, n)
        width = ke - kb

        piv = D[kb:ke, kb:ke]
        for k in range(width):
            np.minimum(piv, piv[:, k, None] + piv[None, k, :], out=piv)

        row_panel = D[kb:ke, :]
        for k in range(width):
            np.minimum(row_panel, piv[:, k, None] + row_panel[None, k, :], out=row_panel)
        col_panel = D[:, kb:ke]
        for k in range(width):
            np.minimum(col_panel, col_panel[:, k, None] + piv[None, k, :], out=col_panel)

        rk = D[kb:ke, :].copy()
        for ib in range(0, n, block):
            if ib == kb:
                continue
            ie = min(ib + block, n)
            acc = D[ib:ie, :]
            cik = D[ib:ie, kb:ke].copy()
            for k in range(width):
                np.minimum(acc, cik[:, k, None] + rk[None, k, :], out=acc)

    D = np.minimum(D, D.T)
    np.fill_diagonal(D, 0.0)
    return D


def dijkstra_apsp(g: KnnGraph) -> np.ndarray:
    """Shortest paths from every source via scipy's Dijkstra."""
    if g.node_count == 0:
        return np.zeros((0, 0))
    D = dijkstra(g.to_csr(), directed=False)
    np.fill_diagonal(D, 0.0)
    return D


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------
def component_labels(g: KnnGraph) -> Tuple[int, np.ndarray]:
    if g.node_count == 0:
        return 0, np.zeros(0, dtype=np.int64)
    count, labels = _cc(g.to_csr(unit_weights=True), directed=False)
    return int(count), labels.astype(np.int64)


def connected_components(g: KnnGraph) -> ComponentReport:
    count, labels = component_labels(g)
    sizes = np.bincount(labels, minlength=count) if count else np.zeros(0, dtype=np.int64)
    return ComponentReport(
        component_count=count,
        component_sizes=[int(s) for s in sizes],
        edge_count=g.edge_count,
    )


# ---------------------------------------------------------------------------
# Closed-form bounds
# ---------------------------------------------------------------------------
def theorem1_bound(node_count: int, sigma: int) -> float:
    """Upper bound N·(1 + ln(1+σ)) / (1+σ) on the component count of a
    graph whose minimum degree is σ."""
    if sigma < 1:
        raise GraphError(f"sigma must be >= 1, got {sigma}")
    if node_count <= 0:
        return 0.0
    return node_count * (1.0 + math.log1p(sigma)) / (1.0 + sigma)


def theorem2_bounds(node_count: int, a: int, b: int) -> Tuple[float, float, float]:
    """(lower, upper, upper_concise) on the edge count when every component
    has between b and a nodes (exclusive)."""
    if a <= 1:
        raise GraphError(f"a must be > 1, got {a}")
    if not (a > b >= 1):
        raise GraphError(f"need a > b >= 1, got a={a}, b={b}")
    n = int(node_count)
    if n <= 0:
        return 0.0, 0.0, 0.0
    lower = float(b * b * (n // b) - n)
    upper = (a - 1) ** (1.0 / a) * n ** (2.0 - 1.0 / a) + (a - 1) * n
    upper_concise = (1.0 - 1.0 / (a - 1)) * n ** 2 / 2.0
    return lower, float(upper), float(upper_concise)


def _within(value: float, limit: float) -> bool:
    return value <= limit + 1e-9 * max(1.0, abs(limit))


def validate_bounds(g: KnnGraph, a: Optional[int] = None, b: Optional[int] = None) -> BoundsReport:
    """Check both bounds against ``g``; failures are reported, never raised.

    When a/b are omitted they are derived from the observed component
    sizes as b = 1 and a = largest + 1, the weakest pair that still
    excludes isolated nodes.
    """
    report = connected_components(g)
    sizes = report.component_sizes
    failures: List[str] = []

    bound1: Optional[float] = None
    if g.neighbor_count >= 1 and g.node_count > 0:
        bound1 = theorem1_bound(g.node_count, g.neighbor_count)
    if bound1 is None or g.min_degree < g.neighbor_count:
        status1 = CheckStatus.out_of_assumption
    elif _within(report.component_count, bound1):
        status1 = CheckStatus.passed
    else:
        status1 = CheckStatus.failed
        failures.append(f"component_count {report.component_count} > bound {bound1:.4f}")

    if sizes and b is None:
        b = 1
    if sizes and a is None:
        a = max(sizes) + 1
    lower = upper = concise = None
    status2 = CheckStatus.out_of_assumption
    if sizes and a is not None and b is not None and a > b >= 1 and all(b < s < a for s in sizes):
        lower, upper, concise = theorem2_bounds(g.node_count, a, b)
        edges = report.edge_count
        ok = edges + 1e-9 >= lower and _within(edges, upper) and _within(edges, concise)
        status2 = CheckStatus.passed if ok else CheckStatus.failed
        if not ok:
            failures.append(
                f"edge_count {edges} outside [{lower:.4f}, min({upper:.4f}, {concise:.4f})] for a={a}, b={b}"
            )

    return BoundsReport(
        node_count=g.node_count,
        sigma=g.neighbor_count,
        min_degree=g.min_degree,
        components=report,
        theorem1_bound=bound1,
        theorem1_status=status1,
        a=a,
        b=b,
        edge_lower=lower,
        edge_upper=upper,
        edge_upper_concise=concise,
        theorem2_status=status2,
        failures=failures,
    )


def sweep_bounds(points: ArrayLike, sigmas: Sequence[int], kind: MetricKind) -> List[BoundsReport]:
    """One report per σ over the same point set."""
    X = ingest_points(points, kind)
    return [validate_bounds(build_knn_graph(X, s, kind)) for s in sigmas]
