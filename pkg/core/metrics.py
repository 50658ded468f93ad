"""Trivial Metrics — endpoint-only distances over feature vectors.

Provides:
  - as_feature_matrix() / as_feature_vector(): validated float64 views
  - normalize() / normalize_rows(): projection onto the unit sphere
  - ingest_points(): validation plus unit projection under cosine, for raw input
  - trivial_distance(), pairwise_distances(), paired_distances()
  - simple_manifold_check(): does a graph geodesic stay within δ of the
    trivial metric for every pair?

Cosine distance is always the *angular* form, so path segments add up in
angle units. It is evaluated as ``2·atan2(‖a−b‖, ‖a+b‖)``, which equals
``arccos(a·b)`` on the unit sphere, is exactly 0 for identical inputs and
never produces NaN.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import cdist

from schemas import MetricKind

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-6
# Rows this close to unit length are left untouched by normalize_rows so
# that re-normalising stored vectors is a no-op.
IDEMPOTENT_NORM_TOLERANCE = 1e-12

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------
class MetricError(ValueError):
    """Raised for malformed feature vectors."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------
def as_feature_matrix(
    points: ArrayLike,
    dim: Optional[int] = None,
    kind: Optional[MetricKind] = None,
) -> np.ndarray:
    """Return ``points`` as a C-contiguous (n, dim) float64 array.

    Checks finiteness, the expected dimension and, under cosine, unit norm.
    """
    X = np.ascontiguousarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.size else X.reshape(0, dim or 0)
    if X.ndim != 2:
        raise MetricError("bad_shape", f"expected a 2-d point array, got shape {X.shape}")
    if dim is not None and X.shape[1] != dim:
        raise MetricError("dimension_mismatch", f"expected dim {dim}, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise MetricError("non_finite", "feature values must be finite")
    if kind == MetricKind.cosine and len(X):
        norms = np.linalg.norm(X, axis=1)
        bad = np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE
        if bad.any():
            first = int(np.flatnonzero(bad)[0])
            raise MetricError(
                "not_unit_normalized",
                f"row {first} has norm {float(norms[first]):.6g}; cosine-angular needs unit vectors",
            )
    return X


def as_feature_vector(
    v: ArrayLike,
    dim: Optional[int] = None,
    kind: Optional[MetricKind] = None,
) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise MetricError("bad_shape", f"expected a 1-d vector, got shape {arr.shape}")
    return as_feature_matrix(arr.reshape(1, -1), dim=dim, kind=kind)[0]


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise MetricError("dimension_mismatch", f"{a.shape[-1]} vs {b.shape[-1]}")


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------
def normalize(v: ArrayLike) -> np.ndarray:
    """Unit-length copy of ``v``; a zero vector is an error."""
    arr = as_feature_vector(v)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise MetricError("zero_vector", "cannot normalise a zero vector")
    return arr / norm


def normalize_rows(points: ArrayLike) -> np.ndarray:
    """Unit-length copy of every row.

    Rows already unit to within 1e-12 are copied as-is, so the call is
    idempotent bit for bit.
    """
    X = as_feature_matrix(points).copy()
    if not len(X):
        return X
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0.0).any():
        raise MetricError("zero_vector", f"row {int(np.flatnonzero(norms == 0.0)[0])} is zero")
    scale = np.abs(norms - 1.0) > IDEMPOTENT_NORM_TOLERANCE
    X[scale] /= norms[scale, None]
    return X


def ingest_points(points: ArrayLike, kind: MetricKind, dim: Optional[int] = None) -> np.ndarray:
    """Validated copy of raw input; under cosine every row is projected to unit length.

    Zero rows stay an error.
    """
    X = as_feature_matrix(points, dim=dim)
    if kind == MetricKind.cosine:
        X = normalize_rows(X)
    return X


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------
def pairwise_distances(
    X: ArrayLike,
    Y: Optional[ArrayLike] = None,
    kind: MetricKind = MetricKind.cosine,
) -> np.ndarray:
    """(len(X), len(Y)) matrix of trivial distances.

    Exactly symmetric with a zero diagonal when ``Y`` is omitted.
    """
    A = as_feature_matrix(X)
    B = A if Y is None else as_feature_matrix(Y)
    _check_pair(A, B)
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    diff = cdist(A, B, "euclidean")
    if kind == MetricKind.euclidean:
        return diff
    total = cdist(A, -B, "euclidean")
    return 2.0 * np.arctan2(diff, total)


def paired_distances(
    X: ArrayLike,
    Y: ArrayLike,
    kind: MetricKind = MetricKind.cosine,
) -> np.ndarray:
    """Row-by-row distances d(X[i], Y[i])."""
    A = as_feature_matrix(X)
    B = as_feature_matrix(Y)
    _check_pair(A, B)
    if A.shape != B.shape:
        raise MetricError("shape_mismatch", f"{A.shape} vs {B.shape}")
    diff = np.linalg.norm(A - B, axis=1)
    if kind == MetricKind.euclidean:
        return diff
    return 2.0 * np.arctan2(diff, np.linalg.norm(A + B, axis=1))


def trivial_distance(a: ArrayLike, b: ArrayLike, kind: MetricKind = MetricKind.cosine) -> float:
    """Distance that depends only on the two endpoints."""
    va = as_feature_vector(a, kind=kind)
    vb = as_feature_vector(b, kind=kind)
    _check_pair(va, vb)
    return float(pairwise_distances(va[None, :], vb[None, :], kind)[0, 0])


# ---------------------------------------------------------------------------
# Simple-manifold diagnostic
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SimpleManifoldThreshold:
    delta: float

    def __post_init__(self) -> None:
        if not (self.delta > 0 and math.isfinite(self.delta)):
            raise MetricError("bad_threshold", f"delta must be a positive finite number, got {self.delta}")

    @classmethod
    def for_dim(cls, dim: int) -> "SimpleManifoldThreshold":
        return cls(delta=math.sqrt(dim))


def manifold_gap(points: ArrayLike, geo: np.ndarray, kind: MetricKind) -> float:
    """Largest |d_g − d_t| over all pairs (inf when any pair is unreachable)."""
    X = as_feature_matrix(points, kind=kind)
    G = np.asarray(geo, dtype=np.float64)
    if G.shape != (len(X), len(X)):
        raise MetricError("shape_mismatch", f"geodesic matrix {G.shape} for {len(X)} points")
    if len(X) < 2:
        return 0.0
    iu = np.triu_indices(len(X), k=1)
    gaps = np.abs(G[iu] - pairwise_distances(X, kind=kind)[iu])
    return float(gaps.max())


def simple_manifold_check(
    points: ArrayLike,
    geo: np.ndarray,
    kind: MetricKind,
    thr: SimpleManifoldThreshold,
) -> bool:
    """True iff every pair keeps |d_g − d_t| strictly below ``thr.delta``."""
    return manifold_gap(points, geo, kind) < thr.delta
