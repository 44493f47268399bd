"""Ground truth, recall, QPS/NDC sweeps and merge comparison harnesses."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pgmerge import _backend
from pgmerge.errors import UsageError
from pgmerge.mos import (CostMatrix, MergeOrderGraph, build_cost_matrix, mos_plan, mst_plan,
                         multi_merge, pairwise_plan, path_plan, random_regular_plan, star_plan)
from pgmerge.pgraph import ProximityGraph, build_index
from pgmerge.rnsm import (MergeParams, build_reverse_index, expand_neighbors, params_dict,
                          select_pivots)
from pgmerge.vecstore import GroundTruth, VectorSet, atomic_write, save_ivecs

REPORT_TAG = "# pgmerge-report v1"
DEFAULT_EFS = (16, 32, 64, 128, 256)


def brute_force_knn(base: VectorSet, queries: VectorSet | np.ndarray, k: int) -> GroundTruth:
    """Exact top-k global ids by exhaustive scan; equal distances favor the lower id."""
    q = queries.data if isinstance(queries, VectorSet) else np.atleast_2d(queries)
    if k < 1:
        raise UsageError("k must be positive")
    if k > base.count:
        raise UsageError(f"k={k} exceeds base count {base.count}")
    if len(q) and q.shape[1] != base.dim:
        raise UsageError(f"query dim {q.shape[1]} != base dim {base.dim}")
    X = base.data.astype(np.float64)
    ids = base.ids
    out = np.empty((len(q), k), dtype=np.int64)
    chunk = max(1, 4_000_000 // max(1, X.size))
    for s in range(0, len(q), chunk):
        block = q[s:s + chunk].astype(np.float64)
        diff = block[:, None, :] - X[None, :, :]
        D = np.einsum("qnd,qnd->qn", diff, diff)
        kth = np.partition(D, k - 1, axis=1)[:, k - 1]
        for r in range(len(block)):
            cand = np.flatnonzero(D[r] <= kth[r])
            order = np.lexsort((ids[cand], D[r, cand]))
            out[s + r] = ids[cand[order[:k]]]
    return GroundTruth(out)


def recall_at_k(result_ids, truth_row, k: int) -> float:
    """|first k results ∩ first k truth| / k."""
    found = set(np.asarray(result_ids)[:k].tolist())
    truth = set(np.asarray(truth_row)[:k].tolist())
    return len(found & truth) / k


@dataclass
class BenchResult:
    strategy: str
    ef: int
    recall_at_k: float
    qps: float
    mean_ndc: float
    build_or_merge_ms: float = 0.0
    k: int = 10
    result_ids: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.recall_at_k <= 1.0:
            raise UsageError(f"recall {self.recall_at_k} outside [0, 1]")


def _mean_recall(found: np.ndarray, truth: GroundTruth, k: int) -> float:
    return float(np.mean([recall_at_k(a, b, k) for a, b in zip(found, truth.neighbors)]))


def _check_truth(queries: np.ndarray, truth: GroundTruth, k: int) -> None:
    if truth.query_count != len(queries):
        raise UsageError(f"ground truth has {truth.query_count} rows for {len(queries)} queries")
    if truth.k < k:
        raise UsageError(f"ground truth has depth {truth.k} < k={k}")


def bench_search(graph: ProximityGraph, queries, truth: GroundTruth, efs=DEFAULT_EFS,
                 k: int = 10, strategy: str = "index", build_ms: float = 0.0,
                 backend: str | None = None, repeats: int = 1) -> list[BenchResult]:
    """Single-threaded recall/QPS/NDC sweep over ``efs``; result ids are global ids.

    QPS is the best of ``repeats`` timed passes (results are deterministic).
    """
    kern = _backend.get(backend)
    q = np.ascontiguousarray(queries.data if isinstance(queries, VectorSet) else queries,
                             dtype=np.float32)
    _check_truth(q, truth, k)
    vecs, adj, deg = graph.arrays()
    entry = np.array([graph.entry_point], dtype=np.int32)
    vis = kern.Visited(graph.count)
    gids = graph.ids
    out = []
    for ef in efs:
        if ef < k:
            continue
        elapsed = math.inf
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            ids, _, ndc = kern.search_batch(vecs, adj, deg, q, entry, int(ef), k, vis)
            elapsed = min(elapsed, time.perf_counter() - t0)
        found = np.where(ids >= 0, gids[np.maximum(ids, 0)], -1)
        out.append(BenchResult(strategy, int(ef), _mean_recall(found, truth, k),
                               len(q) / max(elapsed, 1e-12), float(ndc.mean()), build_ms, k,
                               found))
    return out


def bench_separated(indexes: Sequence[ProximityGraph], queries, truth: GroundTruth,
                    efs=DEFAULT_EFS, k: int = 10, strategy: str = "separated",
                    backend: str | None = None, repeats: int = 1) -> list[BenchResult]:
    """Sweep for searching every partition and merging the per-partition top-k."""
    kern = _backend.get(backend)
    q = np.ascontiguousarray(queries.data if isinstance(queries, VectorSet) else queries,
                             dtype=np.float32)
    _check_truth(q, truth, k)
    prepared = [(g.arrays(), np.array([g.entry_point], np.int32), g.ids,
                 kern.Visited(g.count)) for g in indexes if g.count]
    out = []
    for ef in efs:
        if ef < k:
            continue
        elapsed = math.inf
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            all_ids, all_d, ndc = [], [], np.zeros(len(q), dtype=np.int64)
            for (vecs, adj, deg), entry, gids, vis in prepared:
                ids, d, n = kern.search_batch(vecs, adj, deg, q, entry, int(ef), k, vis)
                all_ids.append(np.where(ids >= 0, gids[np.maximum(ids, 0)], -1))
                all_d.append(d)
                ndc += n
            ids = np.concatenate(all_ids, axis=1)
            d = np.concatenate(all_d, axis=1)
            order = np.lexsort((ids, d), axis=1)[:, :k]
            found = np.take_along_axis(ids, order, axis=1)
            elapsed = min(elapsed, time.perf_counter() - t0)
        out.append(BenchResult(strategy, int(ef), _mean_recall(found, truth, k),
                               len(q) / max(elapsed, 1e-12), float(ndc.mean()), 0.0, k, found))
    return out


def interleaved_sweeps(benches: dict, rounds: int = 3) -> dict[str, list[BenchResult]]:
    """Run each zero-argument sweep ``rounds`` times in turn; keep the best QPS per ef.

    Interleaving spreads machine-load drift evenly over the compared sweeps.
    """
    best: dict[str, list[BenchResult]] = {}
    for _ in range(max(1, rounds)):
        for name, sweep in benches.items():
            res = sweep()
            if name not in best:
                best[name] = res
                continue
            for old, new in zip(best[name], res):
                old.qps = max(old.qps, new.qps)
    return best


def qps_at_recall(results: Sequence[BenchResult], target: float) -> float:
    """QPS linearly interpolated at ``target`` recall along the ef sweep.

    Returns nan when the sweep never reaches the target.
    """
    pts = sorted((r.recall_at_k, r.qps) for r in results)
    rec = np.array([p[0] for p in pts])
    qps = np.array([p[1] for p in pts])
    if not len(pts) or rec[-1] < target:
        return math.nan
    i = int(np.argmax(rec >= target))
    if i == 0:
        return float(qps[0])
    lo, hi = i - 1, i
    if rec[hi] == rec[lo]:
        return float(qps[hi])
    w = (target - rec[lo]) / (rec[hi] - rec[lo])
    return float(qps[lo] + w * (qps[hi] - qps[lo]))


def recall_at_qps(results: Sequence[BenchResult], target: float) -> float:
    """Recall linearly interpolated (in log QPS) at ``target`` QPS; nan outside the sweep."""
    pts = sorted((math.log(r.qps), r.recall_at_k) for r in results)
    lq = np.array([p[0] for p in pts])
    rec = np.array([p[1] for p in pts])
    t = math.log(target)
    if not len(pts) or t < lq[0] or t > lq[-1]:
        return math.nan
    return float(np.interp(t, lq, rec))


def recall_on_shared_qps(a: Sequence[BenchResult], b: Sequence[BenchResult],
                         points: int = 8) -> tuple[float, float]:
    """Mean recall of two sweeps over the QPS range they share (log-spaced points)."""
    lo = max(min(r.qps for r in a), min(r.qps for r in b))
    hi = min(max(r.qps for r in a), max(r.qps for r in b))
    if lo > hi:
        return math.nan, math.nan
    grid = np.exp(np.linspace(math.log(lo), math.log(hi), points))
    return (float(np.mean([recall_at_qps(a, g) for g in grid])),
            float(np.mean([recall_at_qps(b, g) for g in grid])))


# -- report writing ----------------------------------------------------------


def write_rows(path, rows: list[dict], config: dict | None = None,
               ids: dict[str, np.ndarray] | None = None) -> None:
    """CSV with the versioned header; ``ids`` are saved beside it as ivecs."""
    fields = list(rows[0]) if rows else []
    with atomic_write(path) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(REPORT_TAG + "\n")
        fh.write("# config: " + json.dumps(config or {}, sort_keys=True, default=str) + "\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    if ids:
        side = Path(str(path) + ".ids")
        side.mkdir(parents=True, exist_ok=True)
        for name, arr in ids.items():
            save_ivecs(arr, side / f"{name}.ivecs")


def read_rows(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _bench_rows(results: Sequence[BenchResult], extra: dict) -> list[dict]:
    return [dict(strategy=r.strategy, ef=r.ef, recall_at_k=f"{r.recall_at_k:.6f}",
                 qps=f"{r.qps:.2f}", mean_ndc=f"{r.mean_ndc:.2f}", **extra) for r in results]


# -- strategy comparison -----------------------------------------------------


STRATEGIES = ("naive", "rnsm", "rnsm+mos-random", "rnsm+mos-centroid", "rebuild", "separated")


@dataclass
class StrategyRun:
    name: str
    graph: ProximityGraph | None
    merge_ms: float
    merge_ndc: int
    edges: int
    results: list[BenchResult] = field(default_factory=list)


def build_all(partitions: Sequence[VectorSet], max_degree: int = 16, ef_construction: int = 100,
              seed: int = 42, backend: str | None = None) -> list[ProximityGraph]:
    return [build_index(p, max_degree, ef_construction, seed, backend) for p in partitions]


def run_strategy(name: str, partitions: Sequence[VectorSet], indexes: Sequence[ProximityGraph],
                 params: MergeParams, R: int | None = None, seed: int = 42,
                 max_degree: int = 16, ef_construction: int = 100,
                 backend: str | None = None) -> StrategyRun:
    m = len(indexes)
    if name == "rebuild":
        union = VectorSet.concat(partitions)
        t0 = time.perf_counter()
        g = build_index(union, max_degree, ef_construction, seed, backend)
        return StrategyRun(name, g, (time.perf_counter() - t0) * 1e3, g.construction_ndc, 0)
    if name == "separated":
        return StrategyRun(name, None, 0.0, 0, 0)
    if name in ("naive", "rnsm"):
        plan = pairwise_plan(m)
        strategy = name
    elif name in ("rnsm+mos-random", "rnsm+mos-centroid"):
        kind = "random" if name.endswith("random") else "centroid"
        plan = mos_plan(build_cost_matrix(partitions, kind), R)
        strategy = "rnsm"
    else:
        raise UsageError(f"unknown strategy {name!r}")
    t0 = time.perf_counter()
    g, rep = multi_merge(indexes, plan, params, strategy, seed, backend=backend)
    return StrategyRun(name, g, (time.perf_counter() - t0) * 1e3, rep.total_ndc, len(plan.edges))


def compare_merge_strategies(partitions: Sequence[VectorSet], queries, truth: GroundTruth,
                             strategies: Sequence[str] = STRATEGIES,
                             params: MergeParams | None = None, efs=DEFAULT_EFS, k: int = 10,
                             R: int | None = None, seed: int = 42, max_degree: int = 16,
                             ef_construction: int = 100, out=None, repeats: int = 3,
                             backend: str | None = None) -> list[dict]:
    """Run every strategy on the same partitions and emit one row per (strategy, ef)."""
    if len(partitions) < 2:
        raise UsageError("need at least two partitions")
    params = params or MergeParams()
    strategies = list(strategies)
    if "rebuild" not in strategies:
        strategies.append("rebuild")
    indexes = build_all(partitions, max_degree, ef_construction, seed, backend)
    runs = {name: run_strategy(name, partitions, indexes, params, R, seed, max_degree,
                               ef_construction, backend) for name in strategies}

    def sweep(run):
        if run.graph is None:
            return lambda: bench_separated(indexes, queries, truth, efs, k, run.name, backend)
        return lambda: bench_search(run.graph, queries, truth, efs, k, run.name, run.merge_ms,
                                    backend)

    sweeps = interleaved_sweeps({n: sweep(r) for n, r in runs.items()}, repeats)
    for name, run in runs.items():
        run.results = sweeps[name]
    nm, rb = runs.get("naive"), runs["rebuild"]
    rows, ids = [], {}
    for name, run in runs.items():
        extra = dict(merge_ms=f"{run.merge_ms:.3f}", merge_ndc=run.merge_ndc, edges=run.edges,
                     ndc_speedup_vs_nm=_ratio(nm.merge_ndc if nm else 0, run.merge_ndc),
                     time_speedup_vs_nm=_ratio(nm.merge_ms if nm else 0, run.merge_ms),
                     time_speedup_vs_rebuild=_ratio(rb.merge_ms, run.merge_ms))
        rows.extend(_bench_rows(run.results, extra))
        ids.update({f"{name}_ef{r.ef}": r.result_ids for r in run.results})
    if out is not None:
        config = dict(params=params_dict(params), efs=list(efs), k=k, R=R, seed=seed,
                      max_degree=max_degree, ef_construction=ef_construction,
                      strategies=strategies)
        write_rows(out, rows, config, ids)
    return rows


def _ratio(a: float, b: float) -> str:
    return f"{a / b:.4f}" if a and b else ""


TOPOLOGIES = ("path", "star", "mst", "mos", "random-regular")


def topology_plan(name: str, costs: CostMatrix, R: int | None = None, seed: int = 42,
                  regular_degree: int | None = None) -> MergeOrderGraph:
    m = costs.m
    if name == "path":
        return path_plan(costs)
    if name == "star":
        return star_plan(costs)
    if name == "mst":
        return mst_plan(costs)
    if name == "mos":
        return mos_plan(costs, R)
    if name == "random-regular":
        d = regular_degree if regular_degree is not None else max(2, min(R or 4, m - 1))
        if (d * m) % 2:
            d -= 1
        plan = random_regular_plan(m, d, seed)
        plan.costs = costs
        return plan
    raise UsageError(f"unknown topology {name!r}")


def compare_merge_orders(partitions: Sequence[VectorSet], queries, truth: GroundTruth,
                         topologies: Sequence[str] = TOPOLOGIES,
                         params: MergeParams | None = None, efs=DEFAULT_EFS, k: int = 10,
                         R: int | None = None, seed: int = 42, max_degree: int = 16,
                         ef_construction: int = 100, out=None, repeats: int = 3,
                         backend: str | None = None) -> tuple[list[dict], dict]:
    """Multi-merge along each topology over centroid costs and sweep search quality.

    Random-regular uses the MOS plan's average degree, rounded. Returns the
    rows and a dict of per-topology sweeps.
    """
    m = len(partitions)
    if m < 4:
        raise UsageError("need at least four partitions")
    params = params or MergeParams()
    costs = build_cost_matrix(partitions, "centroid")
    indexes = build_all(partitions, max_degree, ef_construction, seed, backend)
    mos = mos_plan(costs, R)
    avg_deg = int(round(2 * len(mos.edges) / m))
    merged = {}
    for name in topologies:
        plan = mos if name == "mos" else topology_plan(name, costs, R, seed, avg_deg)
        t0 = time.perf_counter()
        g, rep = multi_merge(indexes, plan, params, "rnsm", seed, backend=backend)
        merged[name] = (plan, g, rep, (time.perf_counter() - t0) * 1e3)

    def sweep(name, g, ms):
        return lambda: bench_search(g, queries, truth, efs, k, name, ms, backend)

    sweeps = interleaved_sweeps({n: sweep(n, g, ms) for n, (_, g, _, ms) in merged.items()},
                                repeats)
    rows, ids = [], {}
    for name, (plan, g, rep, ms) in merged.items():
        res = sweeps[name]
        extra = dict(edges=len(plan.edges), plan_cost=f"{plan.total_cost(costs):.4f}",
                     diameter=plan.diameter(), merge_ms=f"{ms:.3f}", merge_ndc=rep.total_ndc)
        rows.extend(_bench_rows(res, extra))
        ids.update({f"{name}_ef{r.ef}": r.result_ids for r in res})
    if out is not None:
        config = dict(params=params_dict(params), efs=list(efs), k=k, R=R, seed=seed,
                      topologies=list(topologies))
        write_rows(out, rows, config, ids)
    return rows, sweeps


# -- pivot variants ----------------------------------------------------------


def nsm_chains(knn: np.ndarray | Sequence[Sequence[int]], k: int, seed: int = 42) -> tuple[int, int]:
    """Iterative sliding comparator: (pivots, followers).

    Pivots are drawn in random order. From a pivot the window walks to the
    nearest uncovered node among the current node's ``k`` nearest, each
    step being one slide, until no uncovered neighbor remains.
    """
    rows = [np.asarray(r)[np.asarray(r) >= 0][:k] for r in knn]
    n = len(rows)
    covered = np.zeros(n, dtype=bool)
    pivots = followers = 0
    for start in np.random.default_rng(seed).permutation(n):
        if covered[start]:
            continue
        pivots += 1
        covered[start] = True
        cur = int(start)
        while True:
            nxt = next((int(y) for y in rows[cur] if not covered[y]), None)
            if nxt is None:
                break
            covered[nxt] = True
            followers += 1
            cur = nxt
    return pivots, followers


VARIANTS = ("nsm-iterative", "rnsm-random-pivots", "rnsm")


def pivot_variant_study(source: ProximityGraph, ks: Sequence[int] = (3, 5, 10, 20),
                        variants: Sequence[str] = VARIANTS, k_plus: int | None = None,
                        pad: int = 0, seed: int = 42, out=None,
                        backend: str | None = None) -> list[dict]:
    """Local-sliding ratio per variant and k, from plans alone (no searches)."""
    k_plus = k_plus or max(ks)
    if k_plus >= source.count:
        k_plus = source.count - 1
    knn, _ = expand_neighbors(source, k_plus, pad, backend)
    rows = []
    for k in ks:
        kk = min(k, k_plus)
        for v in variants:
            if v == "nsm-iterative":
                p, f = nsm_chains(knn, kk, seed)
            elif v in ("rnsm", "rnsm-random-pivots"):
                order = "rnn" if v == "rnsm" else "random"
                plan = select_pivots(build_reverse_index(knn, kk), order=order, seed=seed)
                p, f = len(plan.pivots), len(plan.assignment)
            else:
                raise UsageError(f"unknown variant {v!r}")
            rows.append(dict(variant=v, k=k, pivots=p, followers=f,
                             sliding_ratio=f / (p + f) if p + f else 0.0))
    if out is not None:
        write_rows(out, [{**r, "sliding_ratio": f"{r['sliding_ratio']:.6f}"} for r in rows],
                   dict(ks=list(ks), variants=list(variants), k_plus=k_plus, seed=seed))
    return rows


__all__ = [
    "BenchResult", "StrategyRun", "bench_search", "bench_separated", "brute_force_knn", "build_all",
    "compare_merge_orders", "compare_merge_strategies", "interleaved_sweeps", "nsm_chains",
    "pivot_variant_study", "qps_at_recall", "read_rows", "recall_at_k", "recall_at_qps",
    "recall_on_shared_qps", "run_strategy", "topology_plan", "write_rows",
]
