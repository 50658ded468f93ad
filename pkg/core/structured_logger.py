"""Structured Logging — one JSON object per line on stderr.

Provides:
  - EventType: the event names every module logs under
  - StructuredFormatter: JSON lines with numpy-aware field encoding
  - setup_logging(): idempotent root configuration (flag > LOG_LEVEL > WARNING)
  - log_event(): emit one event with the standard fields
  - timed_event(): context manager that logs an event with its latency

Standard fields: timestamp, level, logger, message, event_type, plus
run_id, step, layer and latency_ms when the caller has them.

Arrays are summarised by shape and dtype, never dumped, and non-finite
floats are written as the strings "inf", "-inf" and "nan" so every line
stays strict JSON.
"""

import json
import logging
import math
import os
import sys
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, Optional, TextIO

import numpy as np


class EventType:
    # Index lifecycle
    BUILD_START = "build_start"
    BUILD_COMPLETE = "build_complete"
    LAYER_BUILT = "layer_built"
    CONFIG_CLAMPED = "config_clamped"
    KMEANS_RESEED = "kmeans_reseed"
    PARENT_FALLBACK = "parent_fallback"

    # Pool maintenance
    BATCH_INSERT = "batch_insert"
    SCHEDULED_REBUILD = "scheduled_rebuild"
    WARMUP_REBUILD = "warmup_rebuild"

    # Simulation
    RUN_START = "run_start"
    RUN_COMPLETE = "run_complete"
    STEP_COMPLETE = "step_complete"
    TRUNCATION_OBSERVED = "truncation_observed"

    # Oracle
    ORACLE_CROSS_CHECK = "oracle_cross_check"
    SIZE_LIMIT_HIT = "size_limit_hit"

    # Files and tooling
    FILE_SAVED = "file_saved"
    FILE_LOADED = "file_loaded"
    CHECKPOINT_SKIPPED = "checkpoint_skipped"
    BENCH_ROW = "bench_row"


DEFAULT_LEVEL = "WARNING"

# Attributes every LogRecord carries; anything else on a record came from ``extra``.
_RECORD_ATTRS = frozenset(vars(logging.LogRecord("", logging.INFO, "", 0, "", (), None))) | {"message", "asctime"}


def _json_value(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"shape": list(value.shape), "dtype": str(value.dtype)}
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    return value


class StructuredFormatter(logging.Formatter):
    """Single-line JSON; ``extra`` fields are merged at the top level."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "timestamp": self.formatTime(record, "%Y-%m-%dT%H:%M:%S.") + f"{int(record.msecs):03d}Z",
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        payload.update(
            (key, _json_value(val))
            for key, val in vars(record).items()
            if key not in _RECORD_ATTRS and not key.startswith("_")
        )
        if record.exc_info and record.exc_info[1]:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str, ensure_ascii=False, allow_nan=False)


_configured = False


def _resolve_level(level: Optional[str]) -> int:
    name = level or os.getenv("LOG_LEVEL") or DEFAULT_LEVEL
    resolved = logging.getLevelName(name.upper())
    return resolved if isinstance(resolved, int) else logging.WARNING


def setup_logging(level: Optional[str] = None, stream: Optional[TextIO] = None) -> None:
    """Route the root logger to ``stream`` (default stderr) as JSON lines.

    Only the first call configures anything. An explicit ``level`` wins over
    the LOG_LEVEL environment variable, which wins over WARNING.
    """
    global _configured
    if _configured:
        return
    _configured = True

    root = logging.getLogger()
    root.setLevel(_resolve_level(level))
    root.handlers.clear()
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(StructuredFormatter())
    root.addHandler(handler)


def log_event(
    logger: logging.Logger,
    level: int,
    event_type: str,
    message: str,
    *,
    run_id: Optional[str] = None,
    step: Optional[int] = None,
    layer: Optional[int] = None,
    latency_ms: Optional[float] = None,
    **extra: Any,
) -> None:
    """Emit one structured event.

    Example::

        log_event(logger, logging.INFO, EventType.LAYER_BUILT,
                  "layer ready", layer=1, centers=64, latency_ms=12.5)
    """
    if not logger.isEnabledFor(level):
        return
    fields: Dict[str, Any] = {"event_type": event_type}
    if run_id is not None:
        fields["run_id"] = run_id
    if step is not None:
        fields["step"] = step
    if layer is not None:
        fields["layer"] = layer
    if latency_ms is not None:
        fields["latency_ms"] = round(latency_ms, 2)
    fields.update(extra)
    logger.log(level, message, extra=fields)


@contextmanager
def timed_event(
    logger: logging.Logger,
    level: int,
    event_type: str,
    message: str,
    **fields: Any,
) -> Iterator[Dict[str, Any]]:
    """Log ``event_type`` with ``latency_ms`` when the block exits normally.

    The yielded dict can be filled inside the block; its keys are logged too.
    """
    start = time.monotonic()
    late: Dict[str, Any] = {}
    yield late
    log_event(logger, level, event_type, message,
              latency_ms=(time.monotonic() - start) * 1000, **fields, **late)
