"""Bounded parallel map for per-cluster index work.

Guarantees:
  - Results come back in input order, whatever order tasks finish in
  - Bounded concurrency via asyncio.Semaphore over worker threads
  - No shared mutable state: each task returns its own result bundle
  - The first task error propagates to the caller (an index with a
    missing cluster is worse than no index)

numpy releases the GIL inside the heavy kernels (distance matrices, min-plus
updates), so threads give real overlap for Floyd and k-means work.
"""

import asyncio
import logging
import time
from typing import Callable, List, Sequence, TypeVar

from core.run_config import clamp_threads

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


async def _run_one(
    fn: Callable[[T], R],
    item: T,
    semaphore: asyncio.Semaphore,
    task_key: str,
) -> R:
    async with semaphore:
        start = time.monotonic()
        result = await asyncio.to_thread(fn, item)
        logger.debug(
            "parallel_task_complete | key=%s latency_ms=%.1f",
            task_key, (time.monotonic() - start) * 1000,
        )
        return result


async def map_ordered_async(
    fn: Callable[[T], R],
    items: Sequence[T],
    max_workers: int,
    label: str = "task",
) -> List[R]:
    semaphore = asyncio.Semaphore(clamp_threads(max_workers))
    tasks = [_run_one(fn, item, semaphore, f"{label}_{i}") for i, item in enumerate(items)]
    if not tasks:
        return []
    return list(await asyncio.gather(*tasks))


def map_ordered(
    fn: Callable[[T], R],
    items: Sequence[T],
    max_workers: int = 1,
    label: str = "task",
) -> List[R]:
    """Apply ``fn`` to every item, up to ``max_workers`` at a time.

    With one worker (or fewer than two items) this is a plain loop.
    """
    if clamp_threads(max_workers) == 1 or len(items) < 2:
        return [fn(item) for item in items]
    return asyncio.run(map_ordered_async(fn, items, max_workers, label))
