"""Run Analytics — Deterministic summaries over simulation traces.

All functions are pure and derive their output entirely from the step
records (dicts as written to the JSONL log, or ``StepRecord`` dumps).
Timings are ignored so two traces of the same seed summarise identically.
"""

from typing import Any, Dict, Iterable, List, Mapping

import numpy as np
import pandas as pd


# ---------------------------------------------------------------------------
# 1. Trace loading
# ---------------------------------------------------------------------------
def trace_frame(records: Iterable[Mapping[str, Any]]) -> pd.DataFrame:
    """One row per step, timing columns dropped."""
    rows = [{k: v for k, v in r.items() if k not in ("timing", "positions")} for r in records]
    frame = pd.DataFrame(rows)
    if not frame.empty:
        frame = frame.sort_values("step", kind="stable").reset_index(drop=True)
    return frame


def strip_timings(record: Mapping[str, Any]) -> Dict[str, Any]:
    return {k: v for k, v in record.items() if k != "timing"}


# ---------------------------------------------------------------------------
# 2. Run summary
# ---------------------------------------------------------------------------
def summarize_run(records: List[Mapping[str, Any]]) -> Dict[str, Any]:
    """Loss, mean positive rank and rebuild schedule of one run.

    ``final_mean_rank`` averages the last quarter of the steps (at least
    one), which is where a warm pool has settled.
    """
    frame = trace_frame(records)
    if frame.empty:
        return _empty_run_summary()

    tail = max(1, len(frame) // 4)
    return {
        "steps": int(len(frame)),
        "mean_loss": round(float(frame["loss"].mean()), 6),
        "mean_rank": round(float(frame["mean_rank"].mean()), 6),
        "final_mean_rank": round(float(frame["mean_rank"].iloc[-tail:].mean()), 6),
        "mean_rank_ab": round(float(frame["mean_rank_ab"].mean()), 6),
        "mean_rank_ba": round(float(frame["mean_rank_ba"].mean()), 6),
        "rebuild_steps": [int(s) for s in frame.loc[frame["rebuild"], "step"]],
        "warmup_steps": [int(s) for s in frame.loc[frame["warmup_build"], "step"]],
        "truncation_rate": round(float(frame["truncation_rate"].mean()), 6),
        "unreachable_rate": round(float(frame["unreachable_rate"].mean()), 6),
    }


def rank_curve(records: List[Mapping[str, Any]], window: int = 10) -> List[float]:
    """Rolling mean positive rank, one value per step."""
    frame = trace_frame(records)
    if frame.empty:
        return []
    rolled = frame["mean_rank"].rolling(window=max(1, window), min_periods=1).mean()
    return [round(float(v), 6) for v in rolled]


# ---------------------------------------------------------------------------
# 3. A/B comparison
# ---------------------------------------------------------------------------
def compare_runs(
    baseline: List[Mapping[str, Any]],
    candidate: List[Mapping[str, Any]],
) -> Dict[str, Any]:
    """Step-aligned comparison of two runs; negative deltas favour the candidate."""
    a = summarize_run(baseline)
    b = summarize_run(candidate)
    fa = trace_frame(baseline)
    fb = trace_frame(candidate)
    steps = min(len(fa), len(fb))
    wins = 0
    if steps:
        wins = int(np.count_nonzero(
            fb["mean_rank"].to_numpy()[:steps] < fa["mean_rank"].to_numpy()[:steps]
        ))
    return {
        "baseline": a,
        "candidate": b,
        "mean_rank_delta": round(b["mean_rank"] - a["mean_rank"], 6),
        "final_mean_rank_delta": round(b["final_mean_rank"] - a["final_mean_rank"], 6),
        "mean_loss_delta": round(b["mean_loss"] - a["mean_loss"], 6),
        "aligned_steps": steps,
        "candidate_step_wins": wins,
    }


def traces_equal(a: List[Mapping[str, Any]], b: List[Mapping[str, Any]]) -> bool:
    """Same records once timings are removed."""
    return [strip_timings(r) for r in a] == [strip_timings(r) for r in b]


# ---------------------------------------------------------------------------
# Private Helpers
# ---------------------------------------------------------------------------
def _empty_run_summary() -> Dict[str, Any]:
    return {
        "steps": 0,
        "mean_loss": 0.0,
        "mean_rank": 0.0,
        "final_mean_rank": 0.0,
        "mean_rank_ab": 0.0,
        "mean_rank_ba": 0.0,
        "rebuild_steps": [],
        "warmup_steps": [],
        "truncation_rate": 0.0,
        "unreachable_rate": 0.0,
    }
