"""K-Means over feature vectors, deterministic given a seed.

k-means++ seeding comes from scikit-learn; the Lloyd updates are run here
for exactly ``iters`` rounds so the cluster layout matches the configured
iteration budget rather than a convergence tolerance.
"""

import logging
from typing import NamedTuple, Tuple

import numpy as np
from sklearn.cluster import kmeans_plusplus

from core.metrics import ArrayLike, as_feature_matrix, pairwise_distances
from core.structured_logger import EventType, log_event
from schemas import CenterMode, MetricKind

logger = logging.getLogger(__name__)


class ClusteringError(ValueError):
    """Raised for empty inputs or an impossible cluster count."""


class KMeansResult(NamedTuple):
    centers: np.ndarray      # (k, dim)
    assignment: np.ndarray   # (n,) int64


def _assign(X: np.ndarray, centers: np.ndarray, kind: MetricKind) -> np.ndarray:
    # argmin keeps the first minimum: ties go to the lowest centre index.
    return np.argmin(pairwise_distances(X, centers, kind), axis=1).astype(np.int64)


def _fill_empty(
    X: np.ndarray,
    centers: np.ndarray,
    assignment: np.ndarray,
    kind: MetricKind,
) -> Tuple[np.ndarray, np.ndarray, int]:
    """Give every empty cluster the farthest member of the largest cluster."""
    k = len(centers)
    counts = np.bincount(assignment, minlength=k)
    moved = 0
    for c in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        if counts[donor] <= 1:
            break
        members = np.flatnonzero(assignment == donor)
        spread = pairwise_distances(X[members], centers[donor:donor + 1], kind)[:, 0]
        far = int(members[int(np.argmax(spread))])
        assignment[far] = c
        centers[c] = X[far]
        counts[donor] -= 1
        counts[c] += 1
        moved += 1
    return centers, assignment, moved


def _update(X: np.ndarray, assignment: np.ndarray, previous: np.ndarray, kind: MetricKind) -> np.ndarray:
    k = len(previous)
    counts = np.bincount(assignment, minlength=k)
    sums = np.zeros_like(previous)
    np.add.at(sums, assignment, X)
    centers = previous.copy()
    filled = counts > 0
    centers[filled] = sums[filled] / counts[filled, None]
    if kind == MetricKind.cosine:
        # A one-member cluster is centred on the point itself, exactly.
        norms = np.linalg.norm(centers, axis=1)
        rescale = filled & (counts > 1) & (norms > 0)
        centers[rescale] /= norms[rescale, None]
        collapsed = filled & (norms == 0)
        centers[collapsed] = previous[collapsed]
    return centers


def _medoids(X: np.ndarray, centers: np.ndarray, assignment: np.ndarray, kind: MetricKind) -> np.ndarray:
    out = centers.copy()
    for c in range(len(centers)):
        members = np.flatnonzero(assignment == c)
        if len(members):
            d = pairwise_distances(X[members], centers[c:c + 1], kind)[:, 0]
            out[c] = X[members[int(np.argmin(d))]]
    return out


def kmeans(
    points: ArrayLike,
    k: int,
    iters: int,
    seed: int,
    kind: MetricKind = MetricKind.cosine,
    center_mode: CenterMode = CenterMode.mean,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds.

    Runs exactly ``iters`` centre updates followed by a final assignment.
    Empty clusters are re-seeded from the farthest point of the largest
    cluster, so every returned cluster has at least one member. With
    ``k == len(points)`` every point is its own centre.
    """
    X = as_feature_matrix(points, kind=kind)
    n = len(X)
    if n == 0:
        raise ClusteringError("cannot cluster an empty point set")
    if not 1 <= k <= n:
        raise ClusteringError(f"k={k} must be in [1, {n}]")
    if k == n:
        return KMeansResult(X.copy(), np.arange(n, dtype=np.int64))

    _, seeds = kmeans_plusplus(X, n_clusters=k, random_state=int(seed) % (2**32))
    centers = X[np.sort(seeds)].copy()

    reseeds = 0
    assignment = _assign(X, centers, kind)
    for _ in range(iters):
        centers, assignment, moved = _fill_empty(X, centers, assignment, kind)
        reseeds += moved
        centers = _update(X, assignment, centers, kind)
        assignment = _assign(X, centers, kind)

    if center_mode == CenterMode.medoid:
        centers = _medoids(X, centers, assignment, kind)
        assignment = _assign(X, centers, kind)

    centers, assignment, moved = _fill_empty(X, centers, assignment, kind)
    reseeds += moved
    if reseeds:
        log_event(logger, logging.DEBUG, EventType.KMEANS_RESEED,
                  "empty clusters re-seeded", reseeds=reseeds, k=k, points=n)
    return KMeansResult(centers, assignment)
