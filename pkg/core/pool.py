"""Sample Pool — fixed-capacity circular feature queue with its index queues.

Provides:
  - FeaturePool: ring buffer of vectors with FIFO eviction and write ages
  - AuxQueues: per-slot bottom centre (K), distance to it, and D_o rows,
    cursor-aligned with the pool
  - insert_batch(): write a batch and attach each vector to its nearest
    bottom centre without touching the graph
  - maybe_rebuild(): full rebuild every T0 steps
  - GeodesicQueue: pool + aux + current index behind one writer lock,
    including the warm-up phase before the first full build

Between rebuilds the centres and their APSP stay frozen; new vectors only
attach to bottom centres.
"""

import logging
import threading
import time
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.hierarchy import HierarchicalIndex, build_index, check_d_o, nearest_bottom_centers
from core.metrics import ArrayLike, MetricError, as_feature_matrix, ingest_points
from core.run_config import HierarchyConfig, PoolConfig
from core.structured_logger import EventType, log_event, timed_event
from schemas import InsertReceipt

logger = logging.getLogger(__name__)


class PoolError(ValueError):
    """Raised for batches the pool cannot take."""


# ---------------------------------------------------------------------------
# Feature pool
# ---------------------------------------------------------------------------
class FeaturePool:
    def __init__(self, capacity: int, dim: int, rebuild_period: int = 100) -> None:
        if capacity < 1 or dim < 1 or rebuild_period < 1:
            raise PoolError("capacity, dim and rebuild_period must all be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.rebuild_period = rebuild_period
        self.storage = np.zeros((capacity, dim))
        self.write_cursor = 0
        self.filled = 0
        self.epoch_counter = 1           # training step t, 1-based
        self.rebuild_count = 0
        self.slots_since_rebuild = 0
        self.write_seq = np.full(capacity, -1, dtype=np.int64)
        self.next_seq = 0

    @classmethod
    def from_config(cls, cfg: PoolConfig) -> "FeaturePool":
        return cls(cfg.capacity, cfg.dim, cfg.rebuild_period)

    def write(self, batch: np.ndarray) -> Tuple[np.ndarray, int]:
        """Write rows at successive cursor positions; returns (slots, evicted)."""
        b = len(batch)
        if b > self.capacity:
            raise PoolError(f"batch of {b} exceeds capacity {self.capacity}")
        positions = (self.write_cursor + np.arange(b)) % self.capacity
        evicted = int(np.count_nonzero(self.write_seq[positions] >= 0))
        self.storage[positions] = batch
        self.write_seq[positions] = self.next_seq + np.arange(b)
        self.next_seq += b
        self.write_cursor = int((self.write_cursor + b) % self.capacity)
        self.filled = min(self.filled + b, self.capacity)
        self.slots_since_rebuild += b
        return positions.astype(np.int64), evicted

    def contents(self) -> np.ndarray:
        """Occupied slots 0..filled-1 in slot order (the index's point order)."""
        return self.storage[:self.filled]

    def snapshot(self) -> List[Tuple[int, np.ndarray, int]]:
        """(slot, vector, age) oldest first; the newest entry has age 0."""
        seq = self.write_seq[:self.filled]
        order = np.argsort(seq, kind="stable")
        return [
            (int(s), self.storage[s].copy(), int(self.next_seq - 1 - seq[s]))
            for s in order
        ]


# ---------------------------------------------------------------------------
# Aux queues
# ---------------------------------------------------------------------------
class AuxQueues:
    def __init__(self, capacity: int, n_bottom: int = 0) -> None:
        self.capacity = capacity
        self.bottom_center_index = np.zeros(capacity, dtype=np.int64)
        self.bottom_center_dist = np.zeros(capacity)
        self.d_o_rows = np.zeros((capacity, n_bottom))

    @property
    def n_bottom(self) -> int:
        return int(self.d_o_rows.shape[1])

    def load_from_index(self, idx: HierarchicalIndex) -> None:
        """Replace every queue with the index's own K, distances and D_o."""
        n = idx.point_count
        self.d_o_rows = np.zeros((self.capacity, len(idx.bottom_centers)))
        self.bottom_center_index[:] = 0
        self.bottom_center_dist[:] = 0.0
        self.bottom_center_index[:n] = idx.point_to_bottom_center
        self.bottom_center_dist[:n] = idx.point_to_bottom_dist
        self.d_o_rows[:n] = idx.d_o

    def attach(self, positions: np.ndarray, centers: np.ndarray, dists: np.ndarray, rows: np.ndarray) -> None:
        self.bottom_center_index[positions] = centers
        self.bottom_center_dist[positions] = dists
        self.d_o_rows[positions] = rows


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------
def insert_batch(
    pool: FeaturePool,
    aux: AuxQueues,
    idx: HierarchicalIndex,
    batch: ArrayLike,
) -> InsertReceipt:
    """Write ``batch`` and attach each row to its nearest bottom centre.

    D_o row = d(x, C_near) + B[C_near, :], the same decomposition a rebuild
    produces.
    """
    try:
        X = as_feature_matrix(batch, dim=pool.dim, kind=idx.config.metric)
    except MetricError as e:
        raise PoolError(str(e)) from e
    if aux.n_bottom != len(idx.bottom_centers):
        raise PoolError("aux queues do not match the index; rebuild first")
    centers, dists = nearest_bottom_centers(idx, X)
    rows = dists[:, None] + idx.bottom_center_dist[centers]
    positions, evicted = pool.write(X)
    aux.attach(positions, centers, dists, rows)
    log_event(logger, logging.DEBUG, EventType.BATCH_INSERT, "batch attached",
              batch=len(X), filled=pool.filled, cursor=pool.write_cursor, evicted=evicted)
    return InsertReceipt(
        positions=[int(p) for p in positions],
        filled=pool.filled,
        cursor=pool.write_cursor,
        evicted=evicted,
    )


def rebuild_seed(base_seed: int, rebuild_count: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(rebuild_count)]).generate_state(1)[0])


def rebuild(
    pool: FeaturePool,
    aux: AuxQueues,
    config: HierarchyConfig,
    seed: int,
    threads: int = 1,
) -> HierarchicalIndex:
    """Build over the current contents and refresh every aux queue."""
    if pool.filled == 0:
        raise PoolError("cannot rebuild an empty pool")
    warmup = pool.filled < config.clusters_per_node
    cfg = config.flat(pool.filled) if warmup else config
    idx = build_index(pool.contents(), cfg, rebuild_seed(seed, pool.rebuild_count), threads, warmup=warmup)
    aux.load_from_index(idx)
    if not warmup:
        pool.rebuild_count += 1
    pool.slots_since_rebuild = 0
    return idx


def maybe_rebuild(
    pool: FeaturePool,
    aux: AuxQueues,
    config: HierarchyConfig,
    seed: int,
    threads: int = 1,
) -> Optional[HierarchicalIndex]:
    """Rebuild when t % T0 == 0; t advances either way."""
    t = pool.epoch_counter
    idx = None
    if t % pool.rebuild_period == 0 and pool.filled > 0:
        with timed_event(logger, logging.INFO, EventType.SCHEDULED_REBUILD,
                         "scheduled rebuild", step=t, filled=pool.filled) as fields:
            idx = rebuild(pool, aux, config, seed, threads)
            fields["rebuild_count"] = pool.rebuild_count
    pool.epoch_counter += 1
    return idx


def check_consistency(pool: FeaturePool, aux: AuxQueues, idx: HierarchicalIndex) -> int:
    """Number of occupied slots whose D_o row disagrees with K and the index."""
    n = pool.filled
    return check_d_o(
        idx,
        aux.d_o_rows[:n],
        aux.bottom_center_index[:n],
        aux.bottom_center_dist[:n],
    )


# ---------------------------------------------------------------------------
# Single-writer wrapper
# ---------------------------------------------------------------------------
@dataclass
class StepEvents:
    rebuild: bool = False
    warmup_build: bool = False
    rebuild_ms: float = 0.0


class GeodesicQueue:
    """Pool, aux queues and the live index, mutated under one lock.

    Until the pool holds ``clusters_per_node`` vectors every insert rebuilds
    a flat index (one centre per vector); the insert that crosses that
    threshold triggers the first full build. With ``index_enabled=False``
    the queue is a plain FIFO (cosine baseline).
    """

    def __init__(
        self,
        pool_config: PoolConfig,
        hierarchy: HierarchyConfig,
        seed: int = 0,
        threads: int = 1,
        index_enabled: bool = True,
    ) -> None:
        self._lock = threading.Lock()
        self.pool_config = pool_config
        self.hierarchy = hierarchy
        self.seed = seed
        self.threads = threads
        self.index_enabled = index_enabled
        self.pool = FeaturePool.from_config(pool_config)
        self.aux = AuxQueues(pool_config.capacity)
        self.index: Optional[HierarchicalIndex] = None
        self.last_events = StepEvents()

    @classmethod
    def restore(
        cls,
        pool: FeaturePool,
        aux: AuxQueues,
        index: HierarchicalIndex,
        hierarchy: HierarchyConfig,
        seed: int = 0,
        threads: int = 1,
    ) -> "GeodesicQueue":
        """Queue around a reloaded checkpoint.

        ``hierarchy`` is the run's configuration; a warm-up index carries a
        flat one of its own.
        """
        q = cls(PoolConfig(pool.capacity, pool.dim, pool.rebuild_period), hierarchy, seed, threads)
        q.pool = pool
        q.aux = aux
        q.index = index
        return q

    @property
    def in_warmup(self) -> bool:
        return self.index is None or self.index.warmup

    def prepare_batch(self, batch: ArrayLike) -> np.ndarray:
        try:
            return ingest_points(batch, self.hierarchy.metric, dim=self.pool.dim)
        except MetricError as e:
            raise PoolError(str(e)) from e

    def insert(self, batch: ArrayLike) -> InsertReceipt:
        X = self.prepare_batch(batch)
        with self._lock:
            if not self.index_enabled:
                positions, evicted = self.pool.write(X)
            elif self.in_warmup:
                positions, evicted = self.pool.write(X)
                start = time.monotonic()
                self.index = rebuild(self.pool, self.aux, self.hierarchy, self.seed, self.threads)
                self.last_events.warmup_build = True
                log_event(logger, logging.INFO, EventType.WARMUP_REBUILD, "warm-up build",
                          filled=self.pool.filled, full=not self.index.warmup,
                          latency_ms=(time.monotonic() - start) * 1000)
            else:
                return insert_batch(self.pool, self.aux, self.index, X)
            return InsertReceipt(
                positions=[int(p) for p in positions],
                filled=self.pool.filled,
                cursor=self.pool.write_cursor,
                evicted=evicted,
            )

    def begin_step(self) -> StepEvents:
        """Run the T0 schedule for the current step, then advance t."""
        with self._lock:
            self.last_events = StepEvents()
            if not self.index_enabled or self.in_warmup:
                self.pool.epoch_counter += 1
                return self.last_events
            start = time.monotonic()
            idx = maybe_rebuild(self.pool, self.aux, self.hierarchy, self.seed, self.threads)
            if idx is not None:
                self.index = idx
                self.last_events.rebuild = True
                self.last_events.rebuild_ms = (time.monotonic() - start) * 1000
            return self.last_events

    def consistency_violations(self) -> int:
        with self._lock:
            if self.index is None:
                return 0
            return check_consistency(self.pool, self.aux, self.index)
