"""Command-line entry point: ``pgmerge <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from pgmerge import __version__
from pgmerge.errors import FormatError, PgmergeError, UsageError

log = logging.getLogger("pgmerge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get("PGMERGE_SEED")
    if raw is None:
        return 42
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"PGMERGE_SEED must be an integer, got {raw!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _paths(text: str) -> list[str]:
    return [p for p in text.split(",") if p]


def _merge_params(a):
    from pgmerge.rnsm import MergeParams

    return MergeParams(k_plus=a.k_plus, k=a.k, ef_merge=a.ef, k_cross=a.k_cross,
                       ef_follower=a.ef_follower, expand_pad=a.expand_pad, workers=a.workers)


def _add_merge_flags(p) -> None:
    p.add_argument("--k", type=int, default=5, help="reverse-neighbor size")
    p.add_argument("--k-plus", type=int, default=20, help="neighbor expansion size")
    p.add_argument("--k-cross", type=int, default=10, help="cross neighbors per node")
    p.add_argument("--ef", type=int, default=64, help="beam width for naive cross searches")
    p.add_argument("--ef-follower", type=int, default=None,
                   help="beam width for sliding searches (default: k-cross)")
    p.add_argument("--expand-pad", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def _truth(a):
    """Ground truth, translated from input rows to global ids when --manifest is given."""
    from pgmerge.vecstore import GroundTruth, load_groundtruth

    gt = load_groundtruth(a.gt)
    if not getattr(a, "manifest", None):
        return gt
    from pgmerge.partition import global_ids, read_manifest

    to_global = global_ids(read_manifest(a.manifest))
    if gt.neighbors.size and gt.neighbors.max() >= len(to_global):
        raise UsageError("ground truth names rows outside the manifest")
    return GroundTruth(to_global[gt.neighbors])


def _config(a) -> dict:
    return {k: v for k, v in vars(a).items() if k != "func"}


# -- subcommands -------------------------------------------------------------


def cmd_generate(a) -> None:
    from pgmerge.vecstore import generate, save_fvecs

    vs = generate(a.n, a.dim, a.clusters, a.seed, normalize=a.normalize)
    save_fvecs(vs, a.out)
    if a.queries:
        q = generate(a.queries, a.dim, a.clusters, a.seed + 1, normalize=a.normalize,
                     centers_seed=a.seed)
        save_fvecs(q, a.queries_out or str(Path(a.out).with_suffix("")) + ".queries.fvecs")


def cmd_partition(a) -> None:
    from pgmerge.partition import partition_kmeans, partition_random, write_partitions
    from pgmerge.vecstore import load_fvecs

    vs = load_fvecs(a.input)
    if a.kind == "random":
        parts, spec = partition_random(vs, a.m, a.seed)
        centroids = None
    else:
        parts, spec, centroids = partition_kmeans(vs, a.m, a.seed, a.max_iters)
    write_partitions(parts, spec, a.out_dir, centroids, _config(a))


def cmd_gt(a) -> None:
    from pgmerge.evaluation import brute_force_knn
    from pgmerge.vecstore import load_fvecs, save_groundtruth

    save_groundtruth(brute_force_knn(load_fvecs(a.base), load_fvecs(a.queries), a.k), a.out)


def cmd_build(a) -> None:
    from pgmerge.partition import manifest_offset, read_manifest
    from pgmerge.pgraph import build_index, save_index
    from pgmerge.vecstore import load_fvecs

    vs = load_fvecs(a.input)
    offset = a.id_offset
    if a.manifest:
        if offset is not None:
            raise UsageError("--manifest and --id-offset are mutually exclusive")
        offset = manifest_offset(read_manifest(a.manifest), a.input)
    if offset:
        vs = vs.with_ids(np.arange(offset, offset + vs.count, dtype=np.int64))
    g = build_index(vs, a.max_degree, a.ef_construction, a.seed)
    save_index(g, a.out)
    log.info("built %d nodes, construction ndc %d", g.count, g.construction_ndc)


def cmd_plan(a) -> None:
    from pgmerge.mos import cost_matrix_from_centroids, mos_plan, save_plan
    from pgmerge.vecstore import load_fvecs

    c = load_fvecs(a.centroids)
    if c.count == 0:
        raise UsageError("centroid file is empty")
    costs = cost_matrix_from_centroids(c.data, a.kind)
    delta = float("inf") if a.delta <= 0 else a.delta
    plan = mos_plan(costs, a.R, delta)
    save_plan(plan, a.out)
    log.info("plan: %d edges, cost %.4f, diameter %s, degree violations %d",
             len(plan.edges), plan.total_cost(), plan.diameter(), plan.degree_violations)


def cmd_merge(a) -> None:
    from pgmerge.pgraph import load_index, save_index
    from pgmerge.rnsm import naive_merge, rnsm_merge, write_merge_report

    params = _merge_params(a)
    src, tgt = load_index(a.source), load_index(a.target)
    if a.strategy == "naive":
        merged, report = naive_merge(src, tgt, params)
    else:
        merged, report = rnsm_merge(src, tgt, params, seed=a.seed)
    save_index(merged, a.out)
    if a.report:
        samples = a.samples or str(Path(a.report).with_suffix("")) + ".samples.csv"
        write_merge_report(report, a.report, _config(a), samples)
    log.info("merged %d nodes: total ndc %d, sliding ratio %.3f",
             merged.count, report.total_ndc, report.sliding_ratio)


def cmd_merge_multi(a) -> None:
    from pgmerge.mos import cost_matrix_from_centroids, load_plan, multi_merge
    from pgmerge.pgraph import load_index, save_index
    from pgmerge.rnsm import write_merge_report

    indexes = [load_index(p) for p in _paths(a.indexes)]
    # costs only order the edges; recompute them from the stored vectors
    costs = cost_matrix_from_centroids(
        [g.vectors.astype(np.float64).mean(axis=0) for g in indexes])
    plan = load_plan(a.plan, costs)
    merged, report = multi_merge(indexes, plan, _merge_params(a), a.strategy, a.seed)
    save_index(merged, a.out)
    if a.report:
        write_merge_report(report.combined(), a.report, _config(a))
    log.info("multi-merged %d indexes over %d edges: total ndc %d",
             len(indexes), len(plan.edges), report.total_ndc)


def cmd_search(a) -> None:
    from pgmerge import _backend
    from pgmerge.pgraph import load_index
    from pgmerge.vecstore import atomic_write, load_fvecs, save_ivecs

    g = load_index(a.index)
    q = load_fvecs(a.queries)
    if a.k > a.ef:
        raise UsageError(f"--k {a.k} must not exceed --ef {a.ef}")
    kern = _backend.get()
    vecs, adj, deg = g.arrays()
    t0 = time.perf_counter()
    ids, d, ndc = kern.search_batch(vecs, adj, deg, np.ascontiguousarray(q.data),
                                    np.array([g.entry_point], np.int32), a.ef, a.k)
    elapsed = time.perf_counter() - t0
    found = np.where(ids >= 0, g.ids[np.maximum(ids, 0)], -1)
    if a.manifest:
        from pgmerge.partition import read_manifest, source_rows

        rows = source_rows(read_manifest(a.manifest))
        found = np.where(found >= 0, rows[np.maximum(found, 0)], -1)
    save_ivecs(found, a.out)
    if a.stats:
        with atomic_write(a.stats) as tmp:
            tmp.write_text(json.dumps({"queries": q.count, "ef": a.ef, "k": a.k,
                                       "mean_ndc": float(ndc.mean()) if len(ndc) else 0.0,
                                       "qps": q.count / max(elapsed, 1e-12)}) + "\n")


def cmd_bench(a) -> None:
    from pgmerge.evaluation import bench_search, write_rows
    from pgmerge.pgraph import load_index
    from pgmerge.vecstore import load_fvecs

    g = load_index(a.index)
    res = bench_search(g, load_fvecs(a.queries), _truth(a), _int_list(a.efs), a.k,
                       a.label)
    rows = [dict(strategy=r.strategy, ef=r.ef, recall_at_k=f"{r.recall_at_k:.6f}",
                 qps=f"{r.qps:.2f}", mean_ndc=f"{r.mean_ndc:.2f}") for r in res]
    write_rows(a.out, rows, _config(a), {f"{a.label}_ef{r.ef}": r.result_ids for r in res})
    for r in rows:
        print(",".join(str(v) for v in r.values()))


def cmd_compare(a) -> None:
    from pgmerge.evaluation import (compare_merge_orders, compare_merge_strategies,
                                    pivot_variant_study)
    from pgmerge.pgraph import build_index
    from pgmerge.vecstore import load_fvecs

    parts = []
    off = 0
    for p in _paths(a.parts):
        vs = load_fvecs(p)
        parts.append(vs.with_ids(np.arange(off, off + vs.count, dtype=np.int64)))
        off += vs.count
    params = _merge_params(a)
    if a.mode == "pivots":
        src = build_index(parts[0], a.max_degree, a.ef_construction, a.seed)
        pivot_variant_study(src, seed=a.seed, out=a.out)
        return
    q, gt = load_fvecs(a.queries), _truth(a)
    efs = _int_list(a.efs)
    if a.mode == "strategies":
        strategies = a.strategies.split(",")
        compare_merge_strategies(parts, q, gt, strategies, params, efs, a.recall_k, a.R, a.seed,
                                 a.max_degree, a.ef_construction, a.out)
    else:
        compare_merge_orders(parts, q, gt, params=params, efs=efs, k=a.recall_k, R=a.R,
                             seed=a.seed,
                             max_degree=a.max_degree, ef_construction=a.ef_construction,
                             out=a.out)


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    p = _Parser(prog="pgmerge", description="Build, merge and benchmark proximity-graph indexes.")
    p.add_argument("--version", action="version", version=f"pgmerge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def cmd(name, func, help):
        s = sub.add_parser(name, help=help, description=help)
        s.set_defaults(func=func)
        s.add_argument("--seed", type=int, default=seed)
        return s

    s = cmd("generate", cmd_generate, "write synthetic Gaussian vectors as fvecs")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--dim", type=int, required=True)
    s.add_argument("--clusters", type=int, default=0)
    s.add_argument("--normalize", action="store_true", help="project onto the unit sphere")
    s.add_argument("--queries", type=int, default=0, help="also write this many query vectors")
    s.add_argument("--queries-out")
    s.add_argument("--out", required=True)

    s = cmd("partition", cmd_partition, "split a dataset into partitions")
    s.add_argument("--input", required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--kind", choices=["random", "kmeans"], default="random")
    s.add_argument("--max-iters", type=int, default=50)
    s.add_argument("--out-dir", required=True)

    s = cmd("gt", cmd_gt, "exact ground truth by brute force")
    s.add_argument("--base", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--k", type=int, default=100)
    s.add_argument("--out", required=True)

    s = cmd("build", cmd_build, "build a graph index")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-degree", type=int, default=16)
    s.add_argument("--ef-construction", type=int, default=100)
    s.add_argument("--manifest", help="take the global id offset from a partition manifest")
    s.add_argument("--id-offset", type=int, default=None)

    s = cmd("plan", cmd_plan, "merge order selection over partition centroids")
    s.add_argument("--centroids", required=True)
    s.add_argument("--kind", choices=["centroid", "random"], default="centroid")
    s.add_argument("--R", type=int, default=None, help="degree bound (default min(4, m-1))")
    s.add_argument("--delta", type=int, default=2, help="diameter bound; 0 disables it")
    s.add_argument("--out", required=True)

    s = cmd("merge", cmd_merge, "merge two indexes")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=["rnsm", "naive"], default="rnsm")
    s.add_argument("--report")
    s.add_argument("--samples", help="pivot-distance samples CSV (default beside --report)")
    _add_merge_flags(s)

    s = cmd("merge-multi", cmd_merge_multi, "merge many indexes along a plan")
    s.add_argument("--indexes", required=True, help="comma-separated index files")
    s.add_argument("--plan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--strategy", choices=["rnsm", "naive"], default="rnsm")
    s.add_argument("--report")
    _add_merge_flags(s)

    s = cmd("search", cmd_search, "search an index; writes result ids as ivecs")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--ef", type=int, default=64)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--stats", help="optional JSON with mean NDC and QPS")
    s.add_argument("--manifest", help="report input-row ids instead of global ids")

    s = cmd("bench", cmd_bench, "recall/QPS/NDC sweep over ef")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--efs", default="16,32,64,128,256")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--label", default="index")
    s.add_argument("--manifest", help="ground truth is in input rows; map it via this manifest")
    s.add_argument("--out", required=True)

    s = cmd("compare", cmd_compare, "compare merge strategies, merge orders or pivot variants")
    s.add_argument("--mode", choices=["strategies", "orders", "pivots"], default="strategies")
    s.add_argument("--parts", required=True, help="comma-separated partition fvecs, in id order")
    s.add_argument("--queries")
    s.add_argument("--gt")
    s.add_argument("--strategies", default="naive,rnsm,rnsm+mos-random,rnsm+mos-centroid,"
                                            "rebuild,separated")
    s.add_argument("--efs", default="16,32,64,128,256")
    s.add_argument("--R", type=int, default=None)
    s.add_argument("--max-degree", type=int, default=16)
    s.add_argument("--ef-construction", type=int, default=100)
    s.add_argument("--out", required=True)
    s.add_argument("--recall-k", type=int, default=10)
    s.add_argument("--manifest", help="ground truth is in input rows; map it via this manifest")
    _add_merge_flags(s)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        if args.verbose:
            log.setLevel(logging.DEBUG)
        if args.command == "compare" and args.mode != "pivots" and not (args.queries and args.gt):
            raise UsageError("compare needs --queries and --gt")
        log.info("config: %s", json.dumps(_config(args), sort_keys=True, default=str))
        args.func(args)
        return 0
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else 0
    except (FormatError, OSError) as exc:
        print(f"pgmerge: {exc}", file=sys.stderr)
        return 2
    except (UsageError, PgmergeError) as exc:
        print(f"pgmerge: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
