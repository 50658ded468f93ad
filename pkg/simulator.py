"""Contrastive Simulator — the momentum-queue training loop without a model.

Each step t (1-based):
  Phase 1: both queues run their rebuild schedule (full rebuild when
           t % T0 == 0, nothing otherwise)
  Phase 2: a batch of paired rows is drawn; the B rows are inserted into
           pool B and the A rows into pool A (momentum features)
  Phase 3: A rows are scored against pool B and B rows against pool A,
           with InfoNCE labels at the slots the partners were written to

There is no encoder: the batch features and the momentum features are the
dataset rows themselves, so the trace isolates what the similarity metric
does to positive ranks. ``metric=cosine`` runs the same loop with plain
FIFO queues and dot-product scores.

A run can continue from the checkpoint of an earlier one (``resume``); the
batch draws of the steps it skips are replayed first.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from core.metrics import ArrayLike, as_feature_matrix
from core.pool import GeodesicQueue
from core.run_analytics import summarize_run
from core.run_config import resolve_threads
from core.similarity import contrastive_step, mining_quality
from core.storage import read_index, write_index
from core.structured_logger import EventType, log_event
from schemas import RunConfig, RunSummary, SimilarityMetric, StepRecord

logger = logging.getLogger(__name__)

BATCH_STREAM = 0xB47C


class SimulationError(ValueError):
    """Raised for datasets or batch sizes the loop cannot run on."""


def run_id_for(config: RunConfig, metric: SimilarityMetric, steps: int, batch: int) -> str:
    """Stable run id: the same configuration always gets the same id."""
    payload = json.dumps(
        {"config": config.model_dump(mode="json"), "metric": metric.value, "steps": steps, "batch": batch},
        sort_keys=True,
    )
    return hashlib.sha1(payload.encode("utf-8")).hexdigest()[:12]


def checkpoint_paths(path: str) -> Tuple[str, str]:
    stem, ext = os.path.splitext(path)
    return f"{stem}-a{ext or '.geox'}", f"{stem}-b{ext or '.geox'}"


@dataclass
class SimulationResult:
    summary: RunSummary
    records: List[StepRecord] = field(default_factory=list)


class Simulator:

    def __init__(
        self,
        config: RunConfig,
        points_a: ArrayLike,
        points_b: ArrayLike,
        metric: SimilarityMetric = SimilarityMetric.geodesic,
        threads: Optional[int] = None,
    ) -> None:
        self.config = config
        self.metric = metric
        self.A = as_feature_matrix(points_a)
        self.B = as_feature_matrix(points_b)
        if self.A.shape != self.B.shape:
            raise SimulationError(f"paired sets differ in shape: {self.A.shape} vs {self.B.shape}")
        self.threads = resolve_threads(threads if threads is not None else config.threads)
        self.hierarchy = config.hierarchy_config()
        self.angles = config.angle_config()
        pool_config = config.pool_config(self.A.shape[1])
        geodesic = metric == SimilarityMetric.geodesic
        self.queue_a = GeodesicQueue(pool_config, self.hierarchy, config.seed, self.threads, index_enabled=geodesic)
        self.queue_b = GeodesicQueue(pool_config, self.hierarchy, config.seed + 1, self.threads, index_enabled=geodesic)

    # ------------------------------------------------------------------
    # Batches
    # ------------------------------------------------------------------
    def _batch_rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(np.random.SeedSequence([self.config.seed, BATCH_STREAM])))

    def _validate(self, steps: int, batch: int) -> None:
        if steps < 1:
            raise SimulationError(f"steps must be >= 1, got {steps}")
        if not 1 <= batch <= len(self.A):
            raise SimulationError(f"batch must be in [1, {len(self.A)}], got {batch}")
        if batch > self.config.capacity:
            raise SimulationError(f"batch {batch} exceeds pool capacity {self.config.capacity}")

    # ------------------------------------------------------------------
    # One step
    # ------------------------------------------------------------------
    def step(self, t: int, rows: np.ndarray) -> StepRecord:
        start = time.monotonic()

        # ── Phase 1: rebuild schedule ─────────────────────────────────
        events_a = self.queue_a.begin_step()
        events_b = self.queue_b.begin_step()

        # ── Phases 2-3: insert momentum rows, score both directions ───
        a_rows = self.A[rows]
        b_rows = self.B[rows]
        result = contrastive_step(
            self.queue_a, self.queue_b,
            a_rows, b_rows, a_rows, b_rows,
            self.angles, self.metric, self.config.exclude_unreachable,
        )
        mining_ab = mining_quality(result.sim_ab, self.config.exclude_unreachable)
        mining_ba = mining_quality(result.sim_ba, self.config.exclude_unreachable)

        record = StepRecord(
            step=t,
            metric=self.metric,
            loss=(result.loss_ab.info_nce + result.loss_ba.info_nce) / 2,
            loss_ab=result.loss_ab.info_nce,
            loss_ba=result.loss_ba.info_nce,
            mean_rank=(mining_ab.mean_rank + mining_ba.mean_rank) / 2,
            mean_rank_ab=mining_ab.mean_rank,
            mean_rank_ba=mining_ba.mean_rank,
            margin_p10=(mining_ab.margin_p10 + mining_ba.margin_p10) / 2,
            margin_p50=(mining_ab.margin_p50 + mining_ba.margin_p50) / 2,
            margin_p90=(mining_ab.margin_p90 + mining_ba.margin_p90) / 2,
            truncation_rate=(mining_ab.truncation_rate + mining_ba.truncation_rate) / 2,
            unreachable_rate=(mining_ab.unreachable_rate + mining_ba.unreachable_rate) / 2,
            rebuild=events_a.rebuild or events_b.rebuild,
            warmup_build=self.queue_a.last_events.warmup_build or self.queue_b.last_events.warmup_build,
            pool_filled=self.queue_b.pool.filled,
            positions=result.receipt_b.positions,
            timing={
                "step_ms": round((time.monotonic() - start) * 1000, 3),
                "rebuild_ms": round(events_a.rebuild_ms + events_b.rebuild_ms, 3),
            },
        )
        log_event(logger, logging.DEBUG, EventType.STEP_COMPLETE, "step complete",
                  step=t, loss=round(record.loss, 6), mean_rank=record.mean_rank,
                  rebuild=record.rebuild)
        return record

    # ------------------------------------------------------------------
    # Full run
    # ------------------------------------------------------------------
    def run(
        self,
        steps: int,
        batch: int,
        log_path: Optional[str] = None,
        checkpoint: Optional[str] = None,
        resume: Optional[str] = None,
    ) -> SimulationResult:
        """Run ``steps`` steps, continuing after ``resume`` when given.

        A resumed run replays the batch draws of the steps it skips, so its
        records match the tail of one uninterrupted run.
        """
        self._validate(steps, batch)
        first = self.load_checkpoint(resume) if resume else 1
        run_id = run_id_for(self.config, self.metric, steps, batch)
        rng = self._batch_rng()
        for _ in range(1, first):
            rng.choice(len(self.A), size=batch, replace=False)
        records: List[StepRecord] = []

        log_event(logger, logging.INFO, EventType.RUN_START, "simulation started",
                  run_id=run_id, metric=self.metric.value, steps=steps, batch=batch, first_step=first,
                  points=len(self.A), threads=self.threads)
        start = time.monotonic()

        log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for t in range(first, first + steps):
                rows = rng.choice(len(self.A), size=batch, replace=False)
                record = self.step(t, rows)
                records.append(record)
                if log_fh is not None:
                    log_fh.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")
        finally:
            if log_fh is not None:
                log_fh.close()

        if checkpoint:
            self.save_checkpoint(checkpoint)

        stats = summarize_run([r.model_dump(mode="json") for r in records])
        summary = RunSummary(
            run_id=run_id,
            metric=self.metric,
            steps=stats["steps"],
            batch=batch,
            mean_loss=stats["mean_loss"],
            mean_rank=stats["mean_rank"],
            final_mean_rank=stats["final_mean_rank"],
            rebuild_steps=stats["rebuild_steps"],
            warmup_steps=stats["warmup_steps"],
            truncation_rate=stats["truncation_rate"],
            unreachable_rate=stats["unreachable_rate"],
            config=self.config.model_dump(mode="json"),
        )
        log_event(logger, logging.INFO, EventType.RUN_COMPLETE, "simulation complete",
                  run_id=run_id, mean_rank=summary.mean_rank, rebuilds=len(summary.rebuild_steps),
                  latency_ms=(time.monotonic() - start) * 1000)
        return SimulationResult(summary, records)

    def load_checkpoint(self, path: str) -> int:
        """Swap both queues for the ones saved at ``path``; returns the next step."""
        if self.metric != SimilarityMetric.geodesic:
            raise SimulationError("only geodesic runs can resume from a checkpoint")
        expected = (self.config.capacity, self.A.shape[1], self.config.rebuild_period)
        queues: List[GeodesicQueue] = []
        for side_path, seed in zip(checkpoint_paths(path), (self.config.seed, self.config.seed + 1)):
            idx, pool, aux = read_index(side_path)
            if pool is None or aux is None:
                raise SimulationError(f"{side_path} holds no pool section")
            if (pool.capacity, pool.dim, pool.rebuild_period) != expected:
                raise SimulationError(
                    f"{side_path} has capacity/dim/T0 {(pool.capacity, pool.dim, pool.rebuild_period)}, "
                    f"this run needs {expected}"
                )
            queues.append(GeodesicQueue.restore(pool, aux, idx, self.hierarchy, seed, self.threads))
        self.queue_a, self.queue_b = queues
        first = self.queue_a.pool.epoch_counter
        if self.queue_b.pool.epoch_counter != first:
            raise SimulationError(f"checkpoint halves disagree on the step ({first} vs {self.queue_b.pool.epoch_counter})")
        log_event(logger, logging.INFO, EventType.FILE_LOADED, "checkpoint restored",
                  path=path, step=first, pool_filled=self.queue_b.pool.filled)
        return first

    def save_checkpoint(self, path: str) -> Optional[Tuple[str, str]]:
        """Write both queues (index + pool) as two index containers."""
        if self.queue_a.index is None or self.queue_b.index is None:
            log_event(logger, logging.WARNING, EventType.CHECKPOINT_SKIPPED,
                      "no index to checkpoint (cosine run or empty pool)", path=path)
            return None
        path_a, path_b = checkpoint_paths(path)
        write_index(path_a, self.queue_a.index, self.queue_a.pool, self.queue_a.aux)
        write_index(path_b, self.queue_b.index, self.queue_b.pool, self.queue_b.aux)
        return path_a, path_b


def run_simulation(
    config: RunConfig,
    points_a: ArrayLike,
    points_b: ArrayLike,
    steps: int,
    batch: int,
    metric: SimilarityMetric = SimilarityMetric.geodesic,
    log_path: Optional[str] = None,
    checkpoint: Optional[str] = None,
    threads: Optional[int] = None,
    resume: Optional[str] = None,
) -> SimulationResult:
    sim = Simulator(config, points_a, points_b, metric, threads)
    return sim.run(steps, batch, log_path, checkpoint, resume)


def load_trace(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
