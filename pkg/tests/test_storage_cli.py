"""Binary files and the command line.

Covers:
  - Embedding files: float32 payload, JSON metadata, corruption detection
  - Index containers with and without a pool section, leaf flags, corrupt pool headers
  - Raw distance-matrix dumps
  - CLI commands end to end through main(argv), including exit codes
  - Config-file presets under an explicit --preset, raw input under cosine
  - Resuming a simulation from its checkpoint

Run: python tests/test_storage_cli.py
"""

import hashlib
import io
import json
import logging
import math
import os
import struct
import sys
import tempfile
from contextlib import redirect_stderr, redirect_stdout

# Ensure project root on path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from core.hierarchy import build_index, query_all, query_in_pool
from core.metrics import normalize_rows
from core.pool import AuxQueues, FeaturePool, check_consistency, insert_batch
from core.run_analytics import traces_equal
from core.run_config import HierarchyConfig, resolve_run_config
from core.storage import (
    CorruptFileError,
    read_embeddings,
    read_index,
    read_matrix,
    write_embeddings,
    write_index,
    write_matrix,
)
from core.structured_logger import EventType
from main import main
from schemas import RunConfig, SimilarityMetric
from simulator import Simulator, load_trace

# ── Test infrastructure ─────────────────────────────────────────────────────

passed = 0
failed = 0


def check(name: str, condition: bool, detail: str = ""):
    global passed, failed
    if condition:
        passed += 1
        print(f"  PASS: {name}")
    else:
        failed += 1
        print(f"  FAIL: {name} {('— ' + detail) if detail else ''}")


def raises(exc_type, fn, *args, **kwargs) -> bool:
    try:
        fn(*args, **kwargs)
    except exc_type:
        return True
    return False


def unit_points(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    return normalize_rows(rng.standard_normal((n, dim)))


def run_cli(*argv: str) -> tuple:
    """(exit code, stdout) of one CLI invocation."""
    out = io.StringIO()
    with redirect_stdout(out), redirect_stderr(io.StringIO()):
        code = main(list(argv))
    return code, out.getvalue()


def sha1(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha1(fh.read()).hexdigest()


tmp = tempfile.TemporaryDirectory()
work = tmp.name


def path(name: str) -> str:
    return os.path.join(work, name)


# ── 1. Embedding files ──────────────────────────────────────────────────────

print("\n=== 1. Embedding Files ===\n")

X = unit_points(50, 6, seed=1)
write_embeddings(path("x.emb"), X, {"name": "demo", "seed": 1})
Y, meta = read_embeddings(path("x.emb"))
check("embeddings_round_trip_float32", np.array_equal(Y, X.astype(np.float32).astype(np.float64)))
check("embeddings_widened_to_float64", Y.dtype == np.float64 and Y.shape == (50, 6))
check("embeddings_metadata", meta == {"name": "demo", "seed": 1})

write_embeddings(path("bare.emb"), X)
check("embeddings_without_metadata", read_embeddings(path("bare.emb"))[1] is None)

with open(path("x.emb"), "rb") as fh:
    raw = fh.read()
with open(path("magic.emb"), "wb") as fh:
    fh.write(b"XXXX" + raw[4:])
with open(path("short.emb"), "wb") as fh:
    fh.write(raw[:40])
with open(path("tail.emb"), "wb") as fh:
    fh.write(raw + b"\x01\x02")
check("bad_magic_rejected", raises(CorruptFileError, read_embeddings, path("magic.emb")))
check("truncated_payload_rejected", raises(CorruptFileError, read_embeddings, path("short.emb")))
check("garbled_metadata_rejected", raises(CorruptFileError, read_embeddings, path("tail.emb")))
try:
    read_embeddings(path("magic.emb"))
except CorruptFileError as e:
    check("corrupt_error_carries_path", e.path == path("magic.emb"))


# ── 2. Index containers ─────────────────────────────────────────────────────

print("\n=== 2. Index Containers ===\n")

P = unit_points(300, 10, seed=2)
cfg = HierarchyConfig(layers=2, clusters_per_node=12, sub_clusters=4, neighbors=4)
idx = build_index(P, cfg, seed=3)
write_index(path("plain.geox"), idx)
idx2, pool2, aux2 = read_index(path("plain.geox"))
check("index_without_pool_section", pool2 is None and aux2 is None)
check("index_tables_bit_exact",
      np.array_equal(idx2.d_o, idx.d_o) and np.array_equal(idx2.climb, idx.climb)
      and np.array_equal(idx2.point_to_bottom_center, idx.point_to_bottom_center)
      and np.array_equal(idx2.bottom_center_dist, idx.bottom_center_dist))
check("index_queries_identical", np.array_equal(query_all(idx2), query_all(idx)))
check("index_config_restored", idx2.config.to_trace_dict() == idx.config.to_trace_dict())
check("index_layers_restored", [l.center_count for l in idx2.layers] == [l.center_count for l in idx.layers])

pool = FeaturePool(400, 10, rebuild_period=7)
aux = AuxQueues(400)
pool.write(P)
aux.load_from_index(idx)
insert_batch(pool, aux, idx, unit_points(150, 10, seed=4))
pool.epoch_counter = 11
write_index(path("pool.geox"), idx, pool, aux)
idx3, pool3, aux3 = read_index(path("pool.geox"))
check("pool_storage_bit_exact", np.array_equal(pool3.storage, pool.storage))
check("pool_counters_restored",
      (pool3.write_cursor, pool3.filled, pool3.epoch_counter, pool3.rebuild_period, pool3.next_seq)
      == (pool.write_cursor, pool.filled, pool.epoch_counter, pool.rebuild_period, pool.next_seq))
check("pool_write_order_restored", np.array_equal(pool3.write_seq, pool.write_seq))
check("aux_queues_bit_exact",
      np.array_equal(aux3.d_o_rows, aux.d_o_rows) and np.array_equal(aux3.bottom_center_index, aux.bottom_center_index))
check("restored_pool_consistent", check_consistency(pool3, aux3, idx3) == 0)
check("restored_query_matches", query_in_pool(idx3, 5, 250).angle_sum == query_in_pool(idx, 5, 250).angle_sum)

with open(path("pool.geox"), "rb") as fh:
    container = fh.read()
with open(path("cut.geox"), "wb") as fh:
    fh.write(container[: len(container) // 2])
with open(path("extra.geox"), "wb") as fh:
    fh.write(container + b"\x00" * 3)
check("truncated_index_rejected", raises(CorruptFileError, read_index, path("cut.geox")))
check("trailing_bytes_rejected", raises(CorruptFileError, read_index, path("extra.geox")))
check("embedding_file_is_not_an_index", raises(CorruptFileError, read_index, path("x.emb")))

# The pool section starts right where the pool-less container of the same index ends.
pool_at = os.path.getsize(path("plain.geox"))
check("pool_section_follows_point_tables", container[pool_at:pool_at + 4] == b"POOL")
with open(path("zero_cap.geox"), "wb") as fh:
    fh.write(container[:pool_at + 4] + struct.pack("<I", 0) + container[pool_at + 8:])
with open(path("zero_dim.geox"), "wb") as fh:
    fh.write(container[:pool_at + 8] + struct.pack("<I", 0) + container[pool_at + 12:])
check("zero_capacity_pool_rejected", raises(CorruptFileError, read_index, path("zero_cap.geox")))
check("zero_dim_pool_rejected", raises(CorruptFileError, read_index, path("zero_dim.geox")))

leafy = build_index(P, HierarchyConfig(layers=2, clusters_per_node=30, neighbors=4, leaf_size_threshold=12), seed=3)
write_index(path("leafy.geox"), leafy)
leafy2, _, _ = read_index(path("leafy.geox"))
check("leaf_flags_restored",
      all(np.array_equal(a.leaf, b.leaf) for a, b in zip(leafy.layers, leafy2.layers)) and leafy.bottom.leaf.any())
check("indexed_points_restored", np.array_equal(leafy2.points, leafy.points))
check("leaf_index_queries_identical", np.array_equal(query_all(leafy2), query_all(leafy)))


# ── 3. Matrix dumps ─────────────────────────────────────────────────────────

print("\n=== 3. Matrix Dumps ===\n")

M = query_all(idx)
write_matrix(path("m.f64"), M)
check("matrix_round_trip_exact", np.array_equal(read_matrix(path("m.f64")), M))
check("matrix_file_size", os.path.getsize(path("m.f64")) == 300 * 300 * 8)
with open(path("odd.f64"), "wb") as fh:
    fh.write(np.zeros(6, dtype="<f8").tobytes())
check("non_square_matrix_rejected", raises(CorruptFileError, read_matrix, path("odd.f64")))


# ── 4. CLI: gen / build / query ─────────────────────────────────────────────

print("\n=== 4. CLI gen/build/query ===\n")

code1, _ = run_cli("gen", "sphere-blobs", "--n", "64", "--blobs", "4", "--dim", "8", "--seed", "3",
                   "--out", path("g1.emb"))
code2, _ = run_cli("gen", "sphere-blobs", "--n", "64", "--blobs", "4", "--dim", "8", "--seed", "3",
                   "--out", path("g2.emb"))
check("gen_exit_ok", code1 == 0 and code2 == 0)
check("gen_deterministic", sha1(path("g1.emb")) == sha1(path("g2.emb")))
check("gen_unknown_kind_usage_error", run_cli("gen", "torus", "--out", path("t.emb"))[0] == 2)
check("gen_paired_needs_second_file", run_cli("gen", "paired", "--n", "40", "--out", path("p.emb"))[0] == 2)

code, text = run_cli("build", "--in", path("g1.emb"), "--out", path("g.geox"),
                     "--layers", "1", "--clusters", "64", "--neighbors", "8")
stats = json.loads(text) if code == 0 else {}
check("build_exit_ok", code == 0)
check("build_reports_flat_equivalent", stats.get("flat_equivalent") is True and stats.get("point_count") == 64)
manifold = stats.get("simple_manifold", {})
check("build_reports_simple_manifold",
      manifold.get("delta") == math.sqrt(8) and isinstance(manifold.get("holds"), bool), str(manifold))

with open(path("full.cfg"), "w") as fh:
    fh.write("# layered under the flags\npreset = full\nneighbors = 5\n")
check("config_file_preset_is_base", resolve_run_config(None, path("full.cfg")).capacity == 65536)
explicit = resolve_run_config("desk", path("full.cfg"))
check("explicit_preset_beats_config_file",
      explicit.preset == "desk" and explicit.capacity == 4096 and explicit.neighbors == 5)
code, text = run_cli("build", "--in", path("g1.emb"), "--out", path("cfg.geox"), "--config", path("full.cfg"),
                     "--preset", "desk", "--layers", "1", "--clusters", "64")
cfg_used = json.loads(text)["config"] if code == 0 else {}
check("cli_explicit_preset_beats_config_file",
      cfg_used.get("preset") == "desk" and cfg_used.get("capacity") == 4096 and cfg_used.get("neighbors") == 5,
      str(cfg_used))

# Raw (non-unit) data through the default cosine configuration.
code_gen, _ = run_cli("gen", "swiss-roll", "--n", "300", "--seed", "7", "--out", path("roll.emb"))
roll, _ = read_embeddings(path("roll.emb"))
check("swiss_roll_file_is_raw", code_gen == 0 and float(np.max(np.abs(np.linalg.norm(roll, axis=1) - 1.0))) > 0.5)
code_b, _ = run_cli("build", "--in", path("roll.emb"), "--out", path("roll.geox"))
code_q, _ = run_cli("query", "--index", path("roll.geox"), "--pair", "0", "1")
code_o, text_o = run_cli("oracle", "--in", path("roll.emb"), "--k", "8")
code_c, _ = run_cli("check-bounds", "--in", path("roll.emb"))
check("raw_input_build_exit_ok", code_b == 0)
check("raw_input_query_exit_ok", code_q == 0)
check("raw_input_oracle_exit_ok", code_o == 0)
check("raw_input_check_bounds_exit_ok", code_c == 0)
roll_report = json.loads(text_o) if code_o == 0 else {}
check("oracle_reports_intrinsic_correlation", "spearman_geodesic_vs_intrinsic" in roll_report)
check("oracle_reports_simple_manifold", roll_report.get("simple_manifold", {}).get("delta") == math.sqrt(3))

code, text = run_cli("query", "--index", path("g.geox"), "--pair", "5", "5", "--pair", "0", "1")
lines = text.strip().splitlines()
check("query_csv_header", lines[0] == "i,j,distance,reachable,similarity")
check("query_self_pair_row", lines[1] == "5,5,0,true,1.0", lines[1] if len(lines) > 1 else "")
check("query_second_pair_row", lines[2].startswith("0,1,"))
check("query_bad_index_exit_4", run_cli("query", "--index", path("g.geox"), "--pair", "0", "64")[0] == 4)
check("query_corrupt_index_exit_3", run_cli("query", "--index", path("cut.geox"), "--pair", "0", "1")[0] == 3)
check("query_missing_file_exit_1", run_cli("query", "--index", path("nope.geox"), "--pair", "0", "1")[0] == 1)
check("query_corrupt_pool_exit_3", run_cli("query", "--index", path("zero_dim.geox"), "--pair", "0", "1")[0] == 3)

code_q, _ = run_cli("query", "--index", path("g.geox"), "--all", "--dump", path("h.f64"))
code_o, text_o = run_cli("oracle", "--in", path("g1.emb"), "--k", "8", "--dump", path("e.f64"))
check("query_all_and_oracle_exit_ok", code_q == 0 and code_o == 0)
check("flat_dump_equals_oracle_dump", sha1(path("h.f64")) == sha1(path("e.f64")))
check("oracle_reports_cross_check", code_o == 0 and json.loads(text_o)["cross_check_diff"] <= 1e-12)
check("oracle_size_limit_exit_5", run_cli("oracle", "--in", path("g1.emb"), "--limit", "10")[0] == 5)

code, text = run_cli("compare", "--index", path("g.geox"), "--oracle", path("e.f64"))
check("compare_flat_zero_error", code == 0 and json.loads(text)["max_abs_error"] == 0.0)
check("compare_shape_mismatch_exit_3", run_cli("compare", "--index", path("g.geox"), "--oracle", path("odd.f64"))[0] == 3)

write_embeddings(path("probe.emb"), unit_points(2, 8, seed=5))
code, text = run_cli("query", "--index", path("g.geox"), "--out-of-graph", path("probe.emb"), "--target", "0", "3")
check("out_of_graph_rows", code == 0 and len(text.strip().splitlines()) == 1 + 2 * 2)
write_embeddings(path("probe_raw.emb"), 4.0 * unit_points(2, 8, seed=5))
code_raw, text_raw = run_cli("query", "--index", path("g.geox"), "--out-of-graph", path("probe_raw.emb"), "--target", "0", "3")
unit_rows = [line.split(",") for line in text.strip().splitlines()[1:]]
raw_rows = [line.split(",") for line in text_raw.strip().splitlines()[1:]]
check("out_of_graph_raw_vectors_projected",
      code_raw == 0 and len(raw_rows) == len(unit_rows)
      and all(a[:2] == b[:2] and abs(float(a[2]) - float(b[2])) < 1e-9 for a, b in zip(raw_rows, unit_rows)))


# ── 5. CLI: simulate / check-bounds ─────────────────────────────────────────

print("\n=== 5. CLI simulate/check-bounds ===\n")

sim_args = ["simulate", "--n", "128", "--dim", "16", "--steps", "6", "--batch", "8",
            "--capacity", "64", "--clusters", "16", "--sub-clusters", "4", "--neighbors", "3",
            "--rebuild-period", "3", "--seed", "2"]
code_a, text_a = run_cli(*sim_args, "--log", path("run1.jsonl"), "--checkpoint", path("ck.geox"))
code_b, _ = run_cli(*sim_args, "--log", path("run2.jsonl"))
summary = json.loads(text_a) if code_a == 0 else {}
check("simulate_exit_ok", code_a == 0 and code_b == 0)
check("simulate_warmup_steps", summary.get("warmup_steps") == [1, 2], str(summary.get("warmup_steps")))
check("simulate_rebuild_schedule", summary.get("rebuild_steps") == [3, 6], str(summary.get("rebuild_steps")))
check("simulate_log_one_line_per_step", len(load_trace(path("run1.jsonl"))) == 6)
check("simulate_deterministic", traces_equal(load_trace(path("run1.jsonl")), load_trace(path("run2.jsonl"))))
check("simulate_checkpoints_both_queues",
      os.path.exists(path("ck-a.geox")) and os.path.exists(path("ck-b.geox")))
ck_idx, ck_pool, ck_aux = read_index(path("ck-a.geox"))
check("checkpoint_restores_pool", ck_pool is not None and ck_pool.filled == 48 and check_consistency(ck_pool, ck_aux, ck_idx) == 0)

margins = [(r["margin_p10"], r["margin_p50"], r["margin_p90"]) for r in load_trace(path("run1.jsonl"))]
check("step_records_margin_quantiles", all(p10 <= p50 <= p90 for p10, p50, p90 in margins), str(margins[:2]))

head_args = [a if a != "6" else "3" for a in sim_args]
code_h, _ = run_cli(*head_args, "--checkpoint", path("half.geox"))
code_t, text_t = run_cli(*head_args, "--resume", path("half.geox"), "--log", path("tail.jsonl"))
tail_summary = json.loads(text_t) if code_t == 0 else {}
check("resume_exit_ok", code_h == 0 and code_t == 0)
check("resume_continues_step_numbering",
      [r["step"] for r in load_trace(path("tail.jsonl"))] == [4, 5, 6] and tail_summary.get("rebuild_steps") == [6])
check("resumed_run_matches_uninterrupted_tail",
      traces_equal(load_trace(path("tail.jsonl")), load_trace(path("run1.jsonl"))[3:]))
check("resume_missing_checkpoint_exit_1", run_cli(*head_args, "--resume", path("gone.geox"))[0] == 1)
check("resume_cosine_run_usage_error",
      run_cli(*head_args, "--metric", "cosine", "--resume", path("half.geox"))[0] == 2)


class _Collect(logging.Handler):
    def __init__(self) -> None:
        super().__init__(logging.DEBUG)
        self.events = []

    def emit(self, record: logging.LogRecord) -> None:
        self.events.append(getattr(record, "event_type", None))


collect = _Collect()
sim_logger = logging.getLogger("simulator")
sim_logger.addHandler(collect)
level_before = sim_logger.level
sim_logger.setLevel(logging.INFO)
try:
    cos_sim = Simulator(RunConfig(capacity=32, clusters=8, sub_clusters=2, neighbors=3, seed=1),
                        unit_points(24, 8, seed=6), unit_points(24, 8, seed=7), SimilarityMetric.cosine)
    cos_result = cos_sim.run(2, 4, checkpoint=path("cos.geox"))
finally:
    sim_logger.removeHandler(collect)
    sim_logger.setLevel(level_before)
check("cosine_checkpoint_skipped_event",
      EventType.CHECKPOINT_SKIPPED in collect.events and EventType.FILE_SAVED not in collect.events, str(collect.events))
check("cosine_checkpoint_writes_nothing", not os.path.exists(path("cos-a.geox")) and len(cos_result.records) == 2)
check("simulate_bad_batch_usage_error", run_cli("simulate", "--n", "16", "--steps", "1", "--batch", "32")[0] == 2)

code, text = run_cli("report", "--log", path("run1.jsonl"), "--baseline", path("run2.jsonl"), "--window", "2")
report = json.loads(text) if code == 0 else {}
check("report_exit_ok", code == 0)
check("report_rank_curve_per_step", len(report.get("rank_curve", [])) == 6)
check("report_summary_schedule", report.get("summary", {}).get("rebuild_steps") == [3, 6])
check("report_identical_runs_zero_delta",
      report.get("comparison", {}).get("mean_rank_delta") == 0.0
      and report.get("comparison", {}).get("candidate_step_wins") == 0)
open(path("empty.jsonl"), "w").close()
check("report_empty_log_usage_error", run_cli("report", "--log", path("empty.jsonl"))[0] == 2)

code, text = run_cli("check-bounds", "--in", path("g1.emb"), "--sigma-range", "2:6:2")
rows = text.strip().splitlines()
check("check_bounds_one_row_per_sigma", code == 0 and len(rows) == 1 + 3, str(len(rows)))
check("check_bounds_header", rows[0].startswith("sigma,"))


# ── 6. CLI: sweep / bench ───────────────────────────────────────────────────

print("\n=== 6. CLI sweep/bench ===\n")

code, text = run_cli("sweep", "--in", path("g1.emb"), "--param", "clusters", "--values", "16", "64",
                     "--layers", "1", "--neighbors", "8", "--k", "8")
rows = [line.split(",") for line in text.strip().splitlines()]
check("sweep_one_row_per_value", code == 0 and len(rows) == 1 + 2, str(len(rows)))
if code == 0 and len(rows) == 3:
    col = {name: k for k, name in enumerate(rows[0])}
    flat = rows[2]
    check("sweep_flat_value_matches_oracle",
          flat[col["value"]] == "64" and float(flat[col["rel_error_p50"]]) == 0.0
          and int(flat[col["reachability_disagreements"]]) == 0)
    check("sweep_flat_spearman_one", float(flat[col["spearman"]]) > 1 - 1e-9, flat[col["spearman"]])
check("sweep_rebuild_period_needs_pairs",
      run_cli("sweep", "--in", path("g1.emb"), "--param", "rebuild-period", "--values", "5")[0] == 2)

code, text = run_cli("bench", "--sizes", "64", "--dim", "8", "--clusters", "16", "--sub-clusters", "4",
                     "--neighbors", "4", "--query-pairs", "20",
                     "--floyd-sizes", "16", "32", "--floyd-out", path("floyd.csv"))
rows = text.strip().splitlines()
check("bench_one_row_per_size", code == 0 and len(rows) == 2, str(len(rows)))
check("bench_header", rows[0].startswith("n,dim,clusters,"))
with open(path("floyd.csv")) as f:
    floyd_rows = f.read().strip().splitlines()
check("bench_floyd_scaling_rows", floyd_rows[0] == "centers,floyd_ms,loglog_slope" and len(floyd_rows) == 3)


# ── Summary ─────────────────────────────────────────────────────────────────

tmp.cleanup()
print(f"\n{'=' * 40}")
print(f"TOTAL: {passed} passed, {failed} failed")
if failed == 0:
    print("All tests passed!")
else:
    print(f"FAILURES DETECTED: {failed}")
    sys.exit(1)
