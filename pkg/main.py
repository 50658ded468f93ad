"""geodist command line.

    python main.py gen | build | query | oracle | compare | simulate |
                   check-bounds | bench | sweep | report  [flags]

Machine-readable output (JSON, CSV, JSONL) goes to stdout or --out files;
structured logs go to stderr. Exit codes: 0 ok, 1 I/O failure, 2 usage,
3 corrupt input, 4 bad query index, 5 oracle size limit.
"""

import argparse
import json
import logging
import math
import sys
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from scipy.stats import spearmanr

from core.bench import bench_sizes, bounds_frame, floyd_scaling, sweep_parameter
from core.graph import connected_components, sweep_bounds
from core.hierarchy import (
    QueryIndexError,
    build_index,
    build_stats,
    query_all,
    query_in_pool,
    query_out_of_graph,
)
from core.metrics import SimpleManifoldThreshold, ingest_points, manifold_gap, pairwise_distances
from core.oracle import DEFAULT_SIZE_LIMIT, SizeLimitExceeded, compare_matrices, exact_geodesic
from core.run_analytics import compare_runs, rank_curve, summarize_run
from core.run_config import resolve_run_config, resolve_threads
from core.similarity import angle_normalize
from core.storage import (
    CorruptFileError,
    read_embeddings,
    read_index,
    read_matrix,
    write_embeddings,
    write_index,
    write_matrix,
)
from core.structured_logger import setup_logging
from core.synth import gen_paired_modalities, gen_sphere_blobs, gen_strands, gen_swiss_roll
from schemas import CenterMode, MetricKind, RunConfig, SimilarityMetric, SweepParam
from simulator import load_trace, run_simulation

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_BAD_QUERY = 4
EXIT_SIZE_LIMIT = 5

GEN_KINDS = ("swiss-roll", "sphere-blobs", "strands", "paired")
CSV_HEADER = "i,j,distance,reachable,similarity"


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------
def _emit_json(payload: Dict[str, Any], out: Optional[str] = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _json_default(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def _emit_frame(frame, out: Optional[str]) -> None:
    if out:
        frame.to_csv(out, index=False)
    else:
        sys.stdout.write(frame.to_csv(index=False))


def format_distance(value: float) -> str:
    return "inf" if math.isinf(value) else "%.17g" % value


def format_row(i: int, j: int, distance: float, similarity: float) -> str:
    reachable = "true" if math.isfinite(distance) else "false"
    return f"{i},{j},{format_distance(distance)},{reachable},{similarity!r}"


# ---------------------------------------------------------------------------
# Config flags shared by every index-building command
# ---------------------------------------------------------------------------
def _add_config_flags(p: argparse.ArgumentParser, metric_flag: str = "--metric") -> None:
    g = p.add_argument_group("configuration (preset < --config file < flags)")
    g.add_argument("--config", dest="config_path", help="key = value configuration file")
    g.add_argument("--preset", default=None, help="full | desk (default desk, or the config file's preset)")
    g.add_argument("--layers", type=int)
    g.add_argument("--clusters", type=int, help="top-layer cluster count")
    g.add_argument("--sub-clusters", type=int)
    g.add_argument("--neighbors", type=int, help="σ, neighbours per centre")
    g.add_argument("--kmeans-iters", type=int)
    g.add_argument(metric_flag, dest="trivial_metric", choices=[m.value for m in MetricKind])
    g.add_argument("--leaf-size", dest="leaf_size_threshold", type=int)
    g.add_argument("--center-mode", choices=[m.value for m in CenterMode])
    g.add_argument("--epsilon", type=float, help="also join every pair closer than this")
    g.add_argument("--capacity", type=int, help="pool capacity")
    g.add_argument("--rebuild-period", type=int, help="T0")
    g.add_argument("--max-angle", help="truncation angle, e.g. 4pi")
    g.add_argument("--temperature", type=float)
    g.add_argument("--delta", type=float, help="simple-manifold threshold for build stats (default sqrt(dim))")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int)


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "layers": args.layers,
        "clusters": args.clusters,
        "sub_clusters": args.sub_clusters,
        "neighbors": args.neighbors,
        "kmeans_iters": args.kmeans_iters,
        "metric": args.trivial_metric,
        "leaf_size_threshold": args.leaf_size_threshold,
        "center_mode": args.center_mode,
        "epsilon": args.epsilon,
        "capacity": args.capacity,
        "rebuild_period": args.rebuild_period,
        "max_angle": args.max_angle,
        "temperature": args.temperature,
        "delta": args.delta,
        "seed": args.seed,
        "threads": args.threads,
    }
    return resolve_run_config(args.preset, args.config_path, overrides)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------
def cmd_gen(args: argparse.Namespace) -> int:
    seed = args.seed
    if args.kind == "swiss-roll":
        ds = gen_swiss_roll(args.n, noise=args.noise, seed=seed, embed_dim=args.dim or 3)
    elif args.kind == "sphere-blobs":
        per_blob = args.per_blob or max(1, args.n // args.blobs)
        ds = gen_sphere_blobs(args.blobs, per_blob, args.spread, args.dim or 16, seed=seed)
    else:
        ds = gen_strands(args.n, n_strands=args.strands, length=args.length, gap=args.gap,
                         dim=args.dim or 16, seed=seed)

    if args.kind == "paired":
        if not args.out_b:
            raise ValueError("gen paired needs --out-b for the second modality")
        side_a, side_b, _ = gen_paired_modalities(ds, pair_noise=args.pair_noise,
                                                  curvature_warp=args.warp, seed=seed + 1)
        write_embeddings(args.out, side_a.points, side_a.metadata())
        write_embeddings(args.out_b, side_b.points, side_b.metadata())
        written = [args.out, args.out_b]
    else:
        if args.unit:
            ds = ds.unit_points()
        write_embeddings(args.out, ds.points, ds.metadata())
        written = [args.out]
        if args.csv:
            ds.to_frame().to_csv(args.csv, index=False)
            written.append(args.csv)

    _emit_json({"kind": args.kind, "count": len(ds.points), "dim": ds.dim, "seed": seed, "files": written})
    return EXIT_OK


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------
def cmd_build(args: argparse.Namespace) -> int:
    config = _run_config(args)
    points, _ = read_embeddings(args.input)
    threads = resolve_threads(config.threads)
    start = time.monotonic()
    idx = build_index(points, config.hierarchy_config(), config.seed, threads)
    build_ms = (time.monotonic() - start) * 1000
    write_index(args.out, idx)
    stats = build_stats(idx, build_ms).model_dump(mode="json")
    if idx.point_count <= DEFAULT_SIZE_LIMIT:
        stats["simple_manifold"] = _manifold_report(idx.points, query_all(idx), config.metric, config.delta)
    stats["config"] = config.model_dump(mode="json")
    stats["index"] = args.out
    _emit_json(stats)
    return EXIT_OK


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------
def cmd_query(args: argparse.Namespace) -> int:
    idx, pool, aux = read_index(args.index)
    angles = RunConfig(max_angle=args.max_angle).angle_config() if args.max_angle else RunConfig().angle_config()
    lines: List[str] = [CSV_HEADER]

    if args.all:
        D = query_all(idx)
        if args.dump:
            write_matrix(args.dump, D)
            _emit_json({"dump": args.dump, "points": idx.point_count})
            return EXIT_OK
        n = idx.point_count
        for i in range(n):
            for j in range(i + 1, n):
                lines.append(format_row(i, j, float(D[i, j]), angle_normalize(float(D[i, j]), angles)))
    elif args.out_of_graph:
        vectors, _ = read_embeddings(args.out_of_graph)
        vectors = ingest_points(vectors, idx.config.metric, dim=idx.dim)
        d_o = aux.d_o_rows[:pool.filled] if pool is not None and aux is not None else None
        size = len(d_o) if d_o is not None else idx.point_count
        targets = args.target if args.target else list(range(size))
        for q, v in enumerate(vectors):
            for i in targets:
                r = query_out_of_graph(idx, v, i, d_o)
                lines.append(format_row(q, i, r.angle_sum, angle_normalize(r, angles)))
    elif args.pair:
        for i, j in args.pair:
            r = query_in_pool(idx, i, j)
            lines.append(format_row(i, j, r.angle_sum, angle_normalize(r, angles)))
    else:
        raise ValueError("query needs --pair, --all or --out-of-graph")

    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle / compare
# ---------------------------------------------------------------------------
def cmd_oracle(args: argparse.Namespace) -> int:
    points, metadata = read_embeddings(args.input)
    kind = MetricKind(args.trivial_metric)
    points = ingest_points(points, kind)
    start = time.monotonic()
    table = exact_geodesic(points, args.k, kind, limit=args.limit, cross_check=not args.no_cross_check,
                           epsilon=args.epsilon)
    report: Dict[str, Any] = {
        "points": table.node_count,
        "k": args.k,
        "metric": kind.value,
        "cross_check_diff": table.cross_check_diff,
        "components": connected_components(table.source_graph).model_dump(mode="json"),
        "unreachable_pairs": int(np.count_nonzero(~np.isfinite(table.dist))) // 2,
        "elapsed_ms": round((time.monotonic() - start) * 1000, 2),
    }
    report["simple_manifold"] = _manifold_report(points, table.dist, kind, args.delta)
    if metadata and "intrinsic" in metadata:
        report.update(_intrinsic_correlations(points, table.dist, np.asarray(metadata["intrinsic"]), kind))
    if args.dump:
        write_matrix(args.dump, table.dist)
        report["dump"] = args.dump
    _emit_json(report)
    return EXIT_OK


def _manifold_report(points: np.ndarray, geo: np.ndarray, kind: MetricKind, delta: Optional[float]) -> Dict[str, Any]:
    thr = SimpleManifoldThreshold(delta) if delta is not None else SimpleManifoldThreshold.for_dim(points.shape[1])
    gap = manifold_gap(points, geo, kind)
    return {
        "delta": thr.delta,
        "max_gap": gap if math.isfinite(gap) else None,
        "holds": gap < thr.delta,
    }


def _intrinsic_correlations(points: np.ndarray, geo: np.ndarray, intrinsic: np.ndarray, kind: MetricKind) -> Dict[str, float]:
    iu = np.triu_indices(len(points), k=1)
    truth = pairwise_distances(intrinsic, kind=MetricKind.euclidean)[iu]
    ambient = pairwise_distances(points, kind=kind)[iu]
    g = geo[iu]
    finite = np.isfinite(g)
    return {
        "spearman_geodesic_vs_intrinsic": float(spearmanr(g[finite], truth[finite]).statistic),
        "spearman_ambient_vs_intrinsic": float(spearmanr(ambient, truth).statistic),
    }


def cmd_compare(args: argparse.Namespace) -> int:
    idx, _, _ = read_index(args.index)
    E = read_matrix(args.oracle)
    if E.shape != (idx.point_count, idx.point_count):
        raise CorruptFileError(args.oracle, f"oracle dump is {E.shape[0]}x{E.shape[1]}, index has {idx.point_count} points")
    report = compare_matrices(query_all(idx), E).model_dump(mode="json")
    report["config"] = idx.config.to_trace_dict()
    _emit_json(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------
def _paired_data(args: argparse.Namespace):
    if args.pairs_a or args.pairs_b:
        if not (args.pairs_a and args.pairs_b):
            raise ValueError("--pairs-a and --pairs-b go together")
        A, _ = read_embeddings(args.pairs_a)
        B, _ = read_embeddings(args.pairs_b)
        return A, B
    base = gen_strands(args.n, n_strands=2, length=args.length, gap=args.gap, dim=args.dim, seed=args.data_seed)
    side_a, side_b, _ = gen_paired_modalities(base, pair_noise=args.pair_noise,
                                              curvature_warp=args.warp, seed=args.data_seed + 1)
    return side_a.points, side_b.points


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if args.exclude_unreachable:
        config = config.model_copy(update={"exclude_unreachable": True})
    A, B = _paired_data(args)
    result = run_simulation(config, A, B, args.steps, args.batch, SimilarityMetric(args.metric),
                            log_path=args.log, checkpoint=args.checkpoint, resume=args.resume)
    _emit_json(result.summary.model_dump(mode="json"), args.summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-bounds / bench / sweep
# ---------------------------------------------------------------------------
def _parse_range(text: str) -> List[int]:
    parts = [int(p) for p in text.split(":")]
    if len(parts) == 2:
        parts.append(1)
    if len(parts) != 3 or parts[2] < 1:
        raise ValueError(f"--sigma-range expects start:stop[:step], got {text!r}")
    start, stop, step = parts
    return list(range(start, stop + 1, step))


def cmd_check_bounds(args: argparse.Namespace) -> int:
    points, _ = read_embeddings(args.input)
    sigmas = args.sigmas or (_parse_range(args.sigma_range) if args.sigma_range else [8])
    reports = sweep_bounds(points, sigmas, MetricKind(args.trivial_metric))
    _emit_frame(bounds_frame(reports), args.out)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _run_config(args)
    threads = resolve_threads(config.threads)
    _emit_frame(bench_sizes(args.sizes, config, dim=args.dim, query_pairs=args.query_pairs, threads=threads), args.out)
    if args.floyd_out:
        frame, _ = floyd_scaling(args.floyd_sizes, dim=args.dim, neighbors=config.neighbors, seed=config.seed)
        frame.to_csv(args.floyd_out, index=False)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _run_config(args)
    points, _ = read_embeddings(args.input)
    points_b = read_embeddings(args.pairs_b)[0] if args.pairs_b else None
    frame = sweep_parameter(points, config, SweepParam(args.param), args.values, oracle_k=args.k,
                            points_b=points_b, steps=args.steps, batch=args.batch,
                            threads=resolve_threads(config.threads))
    _emit_frame(frame, args.out)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    records = load_trace(args.log)
    if not records:
        raise ValueError(f"{args.log} holds no step records")
    payload: Dict[str, Any] = {
        "log": args.log,
        "summary": summarize_run(records),
        "rank_curve": rank_curve(records, args.window),
    }
    if args.baseline:
        payload["comparison"] = compare_runs(load_trace(args.baseline), records)
    _emit_json(payload, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geodist", description="Hierarchical geodesic distances over embedding pools.")
    parser.add_argument("--log-level", default=None, help="stderr log level (default LOG_LEVEL or WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("kind", choices=GEN_KINDS)
    p.add_argument("--out", required=True)
    p.add_argument("--out-b", help="second modality (paired only)")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--blobs", type=int, default=3)
    p.add_argument("--per-blob", type=int)
    p.add_argument("--spread", type=float, default=0.05)
    p.add_argument("--strands", type=int, default=2)
    p.add_argument("--length", type=float, default=1.0)
    p.add_argument("--gap", type=float, default=0.25)
    p.add_argument("--warp", type=float, default=0.4)
    p.add_argument("--pair-noise", type=float, default=0.005)
    p.add_argument("--unit", action="store_true", help="unit-normalise the points")
    p.add_argument("--csv", help="also write a CSV copy (at most 10000 points)")
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("build", help="build and save a hierarchical index")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(handler=cmd_build)

    p = sub.add_parser("query", help="geodesic distances from a saved index")
    p.add_argument("--index", required=True)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pair", nargs=2, type=int, action="append", metavar=("I", "J"))
    mode.add_argument("--all", action="store_true")
    mode.add_argument("--out-of-graph", metavar="VEC", help="embedding file of query vectors")
    p.add_argument("--target", type=int, nargs="+", help="pool slots for --out-of-graph (default all)")
    p.add_argument("--dump", help="with --all: write the raw float64 matrix instead of CSV")
    p.add_argument("--max-angle")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_query)

    p = sub.add_parser("oracle", help="exact graph geodesics over every point")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--metric", dest="trivial_metric", choices=[m.value for m in MetricKind], default="cosine")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--limit", type=int, default=DEFAULT_SIZE_LIMIT)
    p.add_argument("--delta", type=float, help="simple-manifold threshold (default sqrt(dim))")
    p.add_argument("--no-cross-check", action="store_true")
    p.add_argument("--dump")
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("compare", help="hierarchical index against an oracle dump")
    p.add_argument("--index", required=True)
    p.add_argument("--oracle", required=True)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("simulate", help="contrastive loop over paired data")
    p.add_argument("--pairs-a")
    p.add_argument("--pairs-b")
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--gap", type=float, default=0.25)
    p.add_argument("--length", type=float, default=1.0)
    p.add_argument("--warp", type=float, default=0.4)
    p.add_argument("--pair-noise", type=float, default=0.005)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--metric", choices=[m.value for m in SimilarityMetric], default="geodesic")
    p.add_argument("--exclude-unreachable", action="store_true")
    p.add_argument("--log", help="JSONL step log")
    p.add_argument("--checkpoint", help="write both queues as index containers at the end")
    p.add_argument("--resume", metavar="CKPT", help="continue from a --checkpoint written by an earlier run")
    p.add_argument("--summary", help="write the run summary here instead of stdout")
    _add_config_flags(p, metric_flag="--trivial-metric")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("check-bounds", help="component and edge-count bounds over σ")
    p.add_argument("--in", dest="input", required=True)
    sig = p.add_mutually_exclusive_group()
    sig.add_argument("--sigmas", type=int, nargs="+")
    sig.add_argument("--sigma-range", help="start:stop[:step], inclusive")
    p.add_argument("--metric", dest="trivial_metric", choices=[m.value for m in MetricKind], default="cosine")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_check_bounds)

    p = sub.add_parser("bench", help="timings per pool size (CSV)")
    p.add_argument("--sizes", type=int, nargs="+", default=[512, 1024, 2048])
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--query-pairs", type=int, default=2000)
    p.add_argument("--floyd-sizes", type=int, nargs="+", default=[128, 256, 512])
    p.add_argument("--floyd-out", help="also write Floyd scaling (with log-log slope) here")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("sweep", help="vary one hyper-parameter")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--pairs-b", help="second modality, for --param rebuild-period")
    p.add_argument("--param", required=True, choices=[s.value for s in SweepParam])
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--k", type=int, help="oracle neighbours (default: --neighbors)")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("report", help="summarise a simulate log, optionally against a baseline log")
    p.add_argument("--log", required=True, help="JSONL step log of the candidate run")
    p.add_argument("--baseline", help="JSONL step log to compare against")
    p.add_argument("--window", type=int, default=10, help="rolling window of the rank curve")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    setup_logging(args.log_level)

    try:
        return args.handler(args)
    except CorruptFileError as e:
        print(f"error: corrupt input: {e}", file=sys.stderr)
        return EXIT_CORRUPT
    except QueryIndexError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_QUERY
    except SizeLimitExceeded as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SIZE_LIMIT
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
