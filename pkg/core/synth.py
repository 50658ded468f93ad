"""Synthetic Datasets — manifolds with known structure.

Every generator draws from ``numpy.random.Generator(Philox(seed))``, a
counter-based bit generator, so a seed reproduces a dataset bit for bit.

Generators:
  - gen_swiss_roll(): the classic roll, intrinsic = (arc length, height)
  - gen_sphere_blobs(): von-Mises-Fisher-style clusters on the unit sphere
  - gen_strands(): parallel latitude arcs on the sphere
  - gen_paired_modalities(): a second "modality" as a smooth warp of a base
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from core.metrics import normalize_rows

logger = logging.getLogger(__name__)

CSV_ROW_LIMIT = 10_000


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(eq=False)
class Dataset:
    name: str
    points: np.ndarray
    seed: int
    intrinsic: Optional[np.ndarray] = None   # coordinates where geodesics are straight lines
    labels: Optional[np.ndarray] = None
    latent: Optional[np.ndarray] = None      # generator parameters per point
    basis: Optional[np.ndarray] = None       # (dim, 3) embedding, when rotated
    params: Dict[str, Any] = field(default_factory=dict)
    norms: Optional[np.ndarray] = None       # original norms after unit_points()

    def __post_init__(self) -> None:
        n = len(self.points)
        for name in ("intrinsic", "labels", "latent"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise ValueError(f"{name} has {len(value)} rows for {n} points")
        if not np.isfinite(self.points).all():
            raise ValueError("dataset points must be finite")

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def unit_points(self) -> "Dataset":
        """Copy with unit-normalised points; the original norms are recorded."""
        return Dataset(
            name=self.name,
            points=normalize_rows(self.points),
            seed=self.seed,
            intrinsic=self.intrinsic,
            labels=self.labels,
            latent=self.latent,
            basis=self.basis,
            params={**self.params, "unit_normalized": True},
            norms=np.linalg.norm(self.points, axis=1),
        )

    def metadata(self) -> Dict[str, Any]:
        meta: Dict[str, Any] = {"name": self.name, "seed": self.seed, **self.params}
        if self.intrinsic is not None:
            meta["intrinsic"] = self.intrinsic.tolist()
        if self.labels is not None:
            meta["labels"] = self.labels.tolist()
        return meta

    def to_frame(self) -> pd.DataFrame:
        if len(self.points) > CSV_ROW_LIMIT:
            raise ValueError(f"CSV export is limited to {CSV_ROW_LIMIT} points")
        frame = pd.DataFrame(self.points, columns=[f"x{i}" for i in range(self.dim)])
        if self.labels is not None:
            frame.insert(0, "label", self.labels)
        if self.intrinsic is not None:
            for j in range(self.intrinsic.shape[1]):
                frame[f"intrinsic{j}"] = self.intrinsic[:, j]
        return frame


def random_basis(rng: np.random.Generator, dim: int, k: int = 3) -> np.ndarray:
    """(dim, k) matrix with orthonormal columns."""
    q, r = np.linalg.qr(rng.standard_normal((dim, k)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Swiss roll
# ---------------------------------------------------------------------------
ROLL_T_MIN = 1.5 * math.pi
ROLL_T_MAX = 4.5 * math.pi
ROLL_HEIGHT = 21.0


def roll_arc_length(t: np.ndarray) -> np.ndarray:
    """Arc length of (t cos t, t sin t) from t = 0."""
    t = np.asarray(t, dtype=np.float64)
    return 0.5 * (t * np.sqrt(1.0 + t * t) + np.arcsinh(t))


def roll_surface(t: np.ndarray, h: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.column_stack([t * np.cos(t), np.asarray(h, dtype=np.float64), t * np.sin(t)])


def gen_swiss_roll(n: int, noise: float = 0.0, seed: int = 0, embed_dim: int = 3) -> Dataset:
    if n < 10:
        raise ValueError(f"swiss roll needs at least 10 points, got {n}")
    if embed_dim < 3:
        raise ValueError("embed_dim must be >= 3")
    rng = make_rng(seed)
    t = ROLL_T_MIN + (ROLL_T_MAX - ROLL_T_MIN) * rng.random(n)
    h = ROLL_HEIGHT * rng.random(n)
    xyz = roll_surface(t, h)
    if noise > 0:
        xyz = xyz + noise * rng.standard_normal(xyz.shape)
    basis = None
    points = xyz
    if embed_dim > 3:
        basis = random_basis(rng, embed_dim)
        points = xyz @ basis.T
    return Dataset(
        name="swiss-roll",
        points=points,
        seed=seed,
        intrinsic=np.column_stack([roll_arc_length(t), h]),
        latent=np.column_stack([t, h]),
        basis=basis,
        params={"kind": "swiss-roll", "n": n, "noise": noise, "embed_dim": embed_dim},
    )


def intrinsic_distances(ds: Dataset) -> np.ndarray:
    if ds.intrinsic is None:
        raise ValueError(f"dataset {ds.name!r} has no intrinsic coordinates")
    return cdist(ds.intrinsic, ds.intrinsic)


# ---------------------------------------------------------------------------
# Sphere blobs
# ---------------------------------------------------------------------------
def gen_sphere_blobs(n_blobs: int, per_blob: int, spread: float, dim: int, seed: int = 0) -> Dataset:
    """Blobs around random unit centres.

    Keep ``spread`` well below the centre separation (about 1/sqrt(dim) for
    random centres) if the blobs should stay separable.
    """
    rng = make_rng(seed)
    centers = normalize_rows(rng.standard_normal((n_blobs, dim)))
    labels = np.repeat(np.arange(n_blobs), per_blob)
    raw = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    return Dataset(
        name="sphere-blobs",
        points=normalize_rows(raw),
        seed=seed,
        labels=labels,
        params={"kind": "sphere-blobs", "n_blobs": n_blobs, "per_blob": per_blob,
                "spread": spread, "dim": dim, "centers": centers.tolist()},
    )


# ---------------------------------------------------------------------------
# Strands
# ---------------------------------------------------------------------------
def strand_latitudes(n_strands: int, gap: float) -> np.ndarray:
    return (np.arange(n_strands) - (n_strands - 1) / 2.0) * gap


def strand_points(strand: np.ndarray, theta: np.ndarray, latitudes: np.ndarray, basis: np.ndarray) -> np.ndarray:
    phi = latitudes[strand.astype(np.int64)]
    xyz = np.column_stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
    return xyz @ basis.T


def gen_strands(
    n: int,
    n_strands: int = 2,
    length: float = 1.0,
    gap: float = 0.25,
    dim: int = 16,
    seed: int = 0,
) -> Dataset:
    """Unit vectors on parallel latitude arcs, rotated into ``dim``.

    Strands are ``gap`` radians apart; a k-NN graph stays inside one strand
    as long as its neighbour radius is below the gap, while points on
    neighbouring strands can be closer than far points of their own strand.
    """
    if dim < 3:
        raise ValueError("strands need dim >= 3")
    rng = make_rng(seed)
    basis = random_basis(rng, dim)
    strand = rng.integers(0, n_strands, size=n)
    theta = length * rng.random(n)
    latitudes = strand_latitudes(n_strands, gap)
    points = normalize_rows(strand_points(strand, theta, latitudes, basis))
    return Dataset(
        name="strands",
        points=points,
        seed=seed,
        intrinsic=np.column_stack([theta * np.cos(latitudes[strand]), latitudes[strand]]),
        labels=strand,
        latent=np.column_stack([strand.astype(np.float64), theta]),
        basis=basis,
        params={"kind": "strands", "n": n, "n_strands": n_strands, "length": length,
                "gap": gap, "dim": dim},
    )


# ---------------------------------------------------------------------------
# Paired modalities
# ---------------------------------------------------------------------------
def gen_paired_modalities(
    base: Dataset,
    pair_noise: float = 0.0,
    curvature_warp: float = 0.0,
    seed: int = 0,
) -> Tuple[Dataset, Dataset, np.ndarray]:
    """Modality A is ``base``; B is a smooth invertible warp of it plus noise.

    Strand data is warped by sliding every point ``curvature_warp`` radians
    along its own strand, which keeps the along-strand order but makes the
    neighbouring strand chord-closer than the true partner once the slide
    exceeds the strand gap. Other data is rotated by ``curvature_warp``
    radians in the plane of the first two axes.
    """
    rng = make_rng(seed)
    A = base.points
    if base.params.get("kind") == "strands" and base.latent is not None and base.basis is not None:
        latitudes = strand_latitudes(base.params["n_strands"], base.params["gap"])
        strand = base.latent[:, 0].astype(np.int64)
        warped = strand_points(strand, base.latent[:, 1] + curvature_warp, latitudes, base.basis)
    else:
        c, s = math.cos(curvature_warp), math.sin(curvature_warp)
        warped = A.copy()
        warped[:, 0] = c * A[:, 0] - s * A[:, 1]
        warped[:, 1] = s * A[:, 0] + c * A[:, 1]
    warped = warped + pair_noise * rng.standard_normal(warped.shape)
    unit = bool(np.all(np.abs(np.linalg.norm(A, axis=1) - 1.0) < 1e-9))
    B_points = normalize_rows(warped) if unit else warped
    pairs = np.arange(len(A), dtype=np.int64)
    params = {**base.params, "pair_noise": pair_noise, "curvature_warp": curvature_warp, "pair_seed": seed}
    side_a = Dataset(base.name + "-a", A.copy(), base.seed, base.intrinsic, base.labels, base.latent,
                     base.basis, {**params, "modality": "a"})
    side_b = Dataset(base.name + "-b", B_points, base.seed, None, base.labels, None,
                     base.basis, {**params, "modality": "b"})
    return side_a, side_b, pairs


def paired_strands(
    n: int = 2048,
    dim: int = 16,
    gap: float = 0.25,
    length: float = 1.0,
    warp: float = 0.4,
    pair_noise: float = 0.005,
    seed: int = 7,
) -> Tuple[Dataset, Dataset, np.ndarray]:
    """The paired dataset the cosine-vs-geodesic comparison runs on."""
    base = gen_strands(n, n_strands=2, length=length, gap=gap, dim=dim, seed=seed)
    return gen_paired_modalities(base, pair_noise=pair_noise, curvature_warp=warp, seed=seed + 1)
