"""Two-index merging: naive merge and reverse-neighbor sliding merge (RNSM)."""
from __future__ import annotations

import csv
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from pgmerge import _backend
from pgmerge.errors import UsageError
from pgmerge.pgraph import (Candidate, ProximityGraph, SearchStats, repair_connectivity,
                             union_graph)
from pgmerge.vecstore import VectorSet, atomic_write

REPORT_TAG = "# pgmerge-report v1"


@dataclass
class MergeParams:
    """Knobs for cross-index merging.

    Followers search with a beam of ``ef_follower`` (default ``k_cross``):
    they start next to their answer, so a wide beam only buys extra
    expansions. ``expand_pad`` widens the expansion beam beyond ``k_plus``.
    """

    k_plus: int = 20
    k: int = 5
    ef_merge: int = 64
    k_cross: int = 10
    ef_follower: int | None = None
    expand_pad: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.k < 1 or self.k_plus < 1:
            raise UsageError("k and k_plus must be positive")
        if self.k > self.k_plus:
            raise UsageError(f"k={self.k} must not exceed k_plus={self.k_plus}")
        if self.k_cross < 1:
            raise UsageError("k_cross must be >= 1")
        if self.ef_merge < self.k_cross:
            raise UsageError(f"ef_merge={self.ef_merge} must be >= k_cross={self.k_cross}")
        if self.ef_follower is not None and self.ef_follower < self.k_cross:
            raise UsageError("ef_follower must be >= k_cross")
        if self.expand_pad < 0:
            raise UsageError("expand_pad must be >= 0")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")

    @property
    def follower_ef(self) -> int:
        return self.k_cross if self.ef_follower is None else self.ef_follower


@dataclass
class ReverseIndex:
    k: int
    knn: list[np.ndarray]
    rnn: list[np.ndarray]

    @property
    def rnn_count(self) -> np.ndarray:
        return np.array([len(r) for r in self.rnn], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.knn)


@dataclass
class PivotPlan:
    pivots: list[int]
    assignment: dict[int, int]
    covered: np.ndarray
    followers: dict[int, list[int]] = field(default_factory=dict)

    @property
    def sliding_ratio(self) -> float:
        total = len(self.pivots) + len(self.assignment)
        return len(self.assignment) / total if total else 0.0


@dataclass
class MergeReport:
    strategy: str
    pivots: int = 0
    followers: int = 0
    expand_ndc: int = 0
    search_ndc: int = 0
    update_ndc: int = 0
    repair_ndc: int = 0
    expand_ms: float = 0.0
    select_ms: float = 0.0
    merge_ms: float = 0.0
    workers: int = 1
    gamma: float = 0.0
    samples: list[tuple[float, int]] = field(default_factory=list)

    @property
    def sliding_ratio(self) -> float:
        total = self.pivots + self.followers
        return self.followers / total if total else 0.0

    @property
    def total_ndc(self) -> int:
        return self.expand_ndc + self.search_ndc + self.update_ndc + self.repair_ndc

    @property
    def wall_ms(self) -> float:
        return self.expand_ms + self.select_ms + self.merge_ms

    def __iadd__(self, other: "MergeReport") -> "MergeReport":
        for name in ("pivots", "followers", "expand_ndc", "search_ndc", "update_ndc", "repair_ndc",
                     "expand_ms", "select_ms", "merge_ms"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        self.samples.extend(other.samples)
        return self

    def phase_rows(self) -> list[dict]:
        base = dict(pivots=self.pivots, followers=self.followers,
                    sliding_ratio=f"{self.sliding_ratio:.6f}")
        return [
            dict(phase="expand", **base, total_ndc=self.expand_ndc, wall_ms=f"{self.expand_ms:.3f}"),
            dict(phase="select", **base, total_ndc=0, wall_ms=f"{self.select_ms:.3f}"),
            dict(phase="merge", **base,
                 total_ndc=self.search_ndc + self.update_ndc + self.repair_ndc,
                 wall_ms=f"{self.merge_ms:.3f}"),
            dict(phase="total", **base, total_ndc=self.total_ndc, wall_ms=f"{self.wall_ms:.3f}"),
        ]


def write_merge_report(report: MergeReport, path, config: dict | None = None,
                       samples_path=None) -> None:
    """Write the phase CSV and, optionally, the (pivot_dist, slide_ndc) samples CSV."""
    fields = ["phase", "pivots", "followers", "sliding_ratio", "total_ndc", "wall_ms"]
    with atomic_write(path) as tmp, open(tmp, "w", newline="") as fh:
        fh.write(REPORT_TAG + "\n")
        fh.write("# config: " + json.dumps(config or {}, sort_keys=True, default=str) + "\n")
        fh.write(f"# strategy: {report.strategy}; workers: {report.workers}; "
                 f"search_ndc: {report.search_ndc}; update_ndc: {report.update_ndc}; "
                 f"repair_ndc: {report.repair_ndc}; "
                 f"gamma: {report.gamma:.3f}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(report.phase_rows())
    if samples_path is not None:
        with atomic_write(samples_path) as tmp, open(tmp, "w", newline="") as fh:
            fh.write(REPORT_TAG + "\n")
            w = csv.writer(fh)
            w.writerow(["pivot_dist", "slide_ndc"])
            w.writerows((f"{d:.6f}", n) for d, n in report.samples)


# -- phase 1 and 2 -----------------------------------------------------------


def expand_neighbors(graph: ProximityGraph, k_plus: int, pad: int = 0,
                     backend: str | None = None) -> tuple[np.ndarray, SearchStats]:
    """Approximate ``k_plus`` nearest neighbors of every node, nearest first.

    Each node seeds a beam search (width ``k_plus + pad``) at itself and
    drops itself from the result. Rows are padded with -1 when fewer nodes
    are reachable.
    """
    if k_plus < 1:
        raise UsageError("k_plus must be positive")
    if k_plus >= graph.count:
        raise UsageError(f"k_plus={k_plus} must be smaller than node count {graph.count}")
    kern = _backend.get(backend)
    vecs, adj, deg = graph.arrays()
    t0 = time.perf_counter()
    knn, ndc = kern.expand(vecs, adj, deg, k_plus, k_plus + 1 + pad)
    return knn, SearchStats(ndc=int(ndc), elapsed=time.perf_counter() - t0)


def build_reverse_index(expanded: Sequence[Sequence[int]] | np.ndarray, k: int) -> ReverseIndex:
    """Keep the first ``k`` entries of each list and invert them."""
    if k < 1:
        raise UsageError("k must be positive")
    knn = []
    for row in expanded:
        row = np.asarray(row, dtype=np.int64)
        knn.append(row[row >= 0][:k])
    n = len(knn)
    buckets: list[list[int]] = [[] for _ in range(n)]
    for y, row in enumerate(knn):
        for x in row:
            buckets[x].append(y)
    rnn = [np.array(b, dtype=np.int64) for b in buckets]
    return ReverseIndex(k=k, knn=knn, rnn=rnn)


def select_pivots(rindex: ReverseIndex, order: str = "rnn", seed: int | None = None) -> PivotPlan:
    """Greedy hub-first pivot selection.

    ``order="rnn"`` visits nodes by descending reverse-neighbor count (lower
    id first on ties); ``order="random"`` uses a seeded shuffle instead.
    An uncovered node becomes a pivot and takes its uncovered reverse
    neighbors as followers.
    """
    n = len(rindex)
    counts = rindex.rnn_count
    if order == "rnn":
        sequence = np.lexsort((np.arange(n), -counts))
    elif order == "random":
        sequence = np.random.default_rng(seed).permutation(n)
    else:
        raise UsageError(f"unknown pivot order {order!r}")
    covered = np.zeros(n, dtype=bool)
    pivots: list[int] = []
    assignment: dict[int, int] = {}
    followers: dict[int, list[int]] = {}
    for x in sequence:
        x = int(x)
        if covered[x]:
            continue
        pivots.append(x)
        covered[x] = True
        group = []
        for y in rindex.rnn[x]:
            y = int(y)
            if not covered[y]:
                covered[y] = True
                assignment[y] = x
                group.append(y)
        followers[x] = group
    return PivotPlan(pivots=pivots, assignment=assignment, covered=covered, followers=followers)


def dps_cost(plan: PivotPlan, vectors, gamma: float,
             distance: Callable[[int, int], float] | None = None) -> float:
    """``gamma * |pivots| + sum of follower-to-pivot distances``."""
    if gamma < 0:
        raise UsageError("gamma must be non-negative")
    n = len(plan.covered)
    if not plan.covered.all() or len(plan.pivots) + len(plan.assignment) != n:
        raise UsageError("plan does not cover every node")
    if distance is None:
        data = vectors.data if isinstance(vectors, VectorSet) else np.asarray(vectors)
        data = data.astype(np.float64)

        def distance(a, b):
            diff = data[a] - data[b]
            return math.sqrt(float(diff @ diff))

    return gamma * len(plan.pivots) + sum(distance(y, p) for y, p in plan.assignment.items())


# -- phase 3 -----------------------------------------------------------------


def update_graph(merged: ProximityGraph, node: int, cross_results, k_cross: int,
                 backend: str | None = None) -> int:
    """Fold cross-index results into ``node``'s neighbor list; returns NDC.

    ``cross_results`` is an ascending list of :class:`Candidate` (node ids in
    ``merged``). Candidates are the current neighbors plus the top
    ``k_cross`` results, RNG-pruned to ``max_degree``; every surviving new
    cross edge also gets its reverse edge.
    """
    kern = _backend.get(backend)
    cross_results = list(cross_results)
    ids = np.array([c.id for c in cross_results], dtype=np.int32)
    sq = np.array([c.dist * c.dist for c in cross_results], dtype=np.float64)
    vecs, adj, deg = merged.arrays()
    if len(ids):
        # exact squared distances keep the ordering consistent with the kernels
        sq = np.array([kern.sqdist(np.ascontiguousarray(vecs[i]), vecs[node]) for i in ids])
    return int(kern.update(vecs, adj, deg, int(node), ids, sq, int(k_cross)))


def _plan_groups(src: ProximityGraph, params: MergeParams, strategy: str, seed: int | None,
                 backend: str | None, report: MergeReport) -> list[tuple[int, list[int]]]:
    n = src.count
    if strategy == "naive":
        report.pivots = n
        return [(v, []) for v in range(n)]
    if n <= 1:
        report.pivots = n
        return [(v, []) for v in range(n)]
    k_plus = min(params.k_plus, n - 1)
    t0 = time.perf_counter()
    knn, stats = expand_neighbors(src, k_plus, params.expand_pad, backend)
    report.expand_ndc = stats.ndc
    report.expand_ms = (time.perf_counter() - t0) * 1e3
    t0 = time.perf_counter()
    rindex = build_reverse_index(knn, min(params.k, k_plus))
    order = "random" if strategy == "rnsm-random" else "rnn"
    plan = select_pivots(rindex, order=order, seed=seed)
    report.select_ms = (time.perf_counter() - t0) * 1e3
    report.pivots = len(plan.pivots)
    report.followers = len(plan.assignment)
    return [(p, plan.followers[p]) for p in plan.pivots]


def cross_link(merged: ProximityGraph, src: ProximityGraph, src_off: int,
               tgt: ProximityGraph, tgt_off: int, params: MergeParams,
               strategy: str = "rnsm", seed: int | None = None,
               backend: str | None = None) -> MergeReport:
    """Search every ``src`` node in ``tgt`` and fold the results into ``merged``.

    ``src``/``tgt`` are the immutable sub-indexes that searches read;
    ``merged`` holds their nodes at row offsets ``src_off``/``tgt_off`` and is
    the only structure mutated. ``strategy`` is ``"naive"``, ``"rnsm"`` or
    ``"rnsm-random"`` (random pivot order, for ablations).
    """
    if strategy not in ("naive", "rnsm", "rnsm-random"):
        raise UsageError(f"unknown merge strategy {strategy!r}")
    if src.count and tgt.count and src.dim != tgt.dim:
        raise UsageError(f"dimension mismatch: {src.dim} vs {tgt.dim}")
    kern = _backend.get(backend)
    report = MergeReport(strategy=strategy, workers=params.workers)
    if src.count == 0 or tgt.count == 0:
        return report
    groups = _plan_groups(src, params, strategy, seed, backend, report)

    svecs = src.vectors
    tvecs, tadj, tdeg = tgt.arrays()
    mvecs, madj, mdeg = merged.arrays()
    t_entry = np.array([tgt.entry_point], dtype=np.int32)
    kc, ef, ef_f = params.k_cross, params.ef_merge, params.follower_ef
    lock = threading.Lock()
    local = threading.local()

    def visited():
        vis = getattr(local, "vis", None)
        if vis is None:
            vis = local.vis = kern.Visited(tgt.count)
        return vis

    def run(group):
        p, followers = group
        vis = visited()
        ids, d, ndc, _ = kern.search(tvecs, tadj, tdeg, svecs[p], t_entry, ef, vis)
        search_ndc, naive_ndc = ndc, ndc
        with lock:
            upd = kern.update(mvecs, madj, mdeg, p + src_off, ids[:kc] + tgt_off, d[:kc], kc)
        seeds = np.ascontiguousarray(ids[:kc])
        slides = []
        for y in followers:
            yids, yd, yndc, _ = kern.search(tvecs, tadj, tdeg, svecs[y], seeds, ef_f, vis)
            search_ndc += yndc
            slides.append((y, yndc))
            with lock:
                upd += kern.update(mvecs, madj, mdeg, y + src_off, yids[:kc] + tgt_off,
                                   yd[:kc], kc)
        return p, naive_ndc, search_ndc, upd, slides

    t0 = time.perf_counter()
    if params.workers == 1:
        out = [run(g) for g in groups]
    else:
        with ThreadPoolExecutor(max_workers=params.workers) as pool:
            out = list(pool.map(run, groups))
    report.merge_ms = (time.perf_counter() - t0) * 1e3

    naive = []
    src64 = svecs.astype(np.float64)
    for p, naive_ndc, search_ndc, upd, slides in out:
        naive.append(naive_ndc)
        report.search_ndc += search_ndc
        report.update_ndc += upd
        for y, yndc in slides:
            diff = src64[y] - src64[p]
            report.samples.append((math.sqrt(float(diff @ diff)), int(yndc)))
    report.gamma = float(np.mean(naive[:100])) if naive else 0.0
    return report


def _merge(source: ProximityGraph, target: ProximityGraph, params: MergeParams, strategy: str,
           seed: int | None, backend: str | None) -> tuple[ProximityGraph, MergeReport]:
    if source.count and target.count and source.dim != target.dim:
        raise UsageError(f"dimension mismatch: {source.dim} vs {target.dim}")
    swap = source.count > target.count
    # entry point of the larger index; ties keep the first
    merged, (s_off, t_off) = union_graph([source, target],
                                         entry_from=0 if source.count >= target.count else 1)
    if swap:
        report = cross_link(merged, target, t_off, source, s_off, params, strategy, seed, backend)
    else:
        report = cross_link(merged, source, s_off, target, t_off, params, strategy, seed, backend)
    t0 = time.perf_counter()
    report.repair_ndc = repair_connectivity(merged, backend=backend)
    report.merge_ms += (time.perf_counter() - t0) * 1e3
    return merged, report


def naive_merge(source: ProximityGraph, target: ProximityGraph, params: MergeParams | None = None,
                backend: str | None = None) -> tuple[ProximityGraph, MergeReport]:
    """Every source node runs a full search from the target's entry point.

    The smaller index always plays the source role; the merged node order is
    ``source`` rows then ``target`` rows either way.
    """
    return _merge(source, target, params or MergeParams(), "naive", None, backend)


def rnsm_merge(source: ProximityGraph, target: ProximityGraph, params: MergeParams | None = None,
               seed: int | None = None, backend: str | None = None,
               strategy: str = "rnsm") -> tuple[ProximityGraph, MergeReport]:
    """Reverse-neighbor sliding merge of two indexes (smaller into larger)."""
    return _merge(source, target, params or MergeParams(), strategy, seed, backend)


def tune_ef(graphs: Sequence[ProximityGraph], queries: np.ndarray, truth: Sequence[np.ndarray],
            target_recall: float = 0.98, k: int = 10,
            candidates: Sequence[int] = (16, 24, 32, 48, 64, 96, 128, 192, 256),
            backend: str | None = None) -> int:
    """Smallest ef whose mean recall@k over ``graphs`` exceeds ``target_recall``.

    ``truth[i]`` holds exact neighbor ids (global) of ``queries`` within
    ``graphs[i]``.
    """
    kern = _backend.get(backend)
    q = np.ascontiguousarray(queries, dtype=np.float32)
    for ef in candidates:
        if ef < k:
            continue
        recalls = []
        for g, gt in zip(graphs, truth):
            vecs, adj, deg = g.arrays()
            ids, _, _ = kern.search_batch(vecs, adj, deg, q, np.array([g.entry_point], np.int32),
                                          ef, k)
            found = g.ids[ids]
            recalls.append(np.mean([len(set(a) & set(b[:k])) / k for a, b in zip(found, gt)]))
        if np.mean(recalls) > target_recall:
            return int(ef)
    return int(candidates[-1])


def params_dict(params: MergeParams) -> dict:
    return asdict(params)


__all__ = [
    "Candidate", "MergeParams", "MergeReport", "PivotPlan", "ReverseIndex",
    "build_reverse_index", "cross_link", "dps_cost", "expand_neighbors", "naive_merge",
    "rnsm_merge", "select_pivots", "tune_ef", "update_graph", "write_merge_report",
]
