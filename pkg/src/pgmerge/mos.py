"""Merge order selection over partitions and multi-index merging along a plan."""
from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from pgmerge import _backend
from pgmerge.errors import FormatError, UsageError
from pgmerge.pgraph import Candidate, ProximityGraph, SearchStats, repair_connectivity, union_graph
from pgmerge.rnsm import MergeParams, MergeReport, cross_link
from pgmerge.vecstore import VectorSet, atomic_write

UNREACHABLE = 1 << 30

_KINDS = {"random": "random-unit", "random-unit": "random-unit",
          "centroid": "centroid-distance", "centroid-distance": "centroid-distance"}


@dataclass(frozen=True)
class CostMatrix:
    costs: np.ndarray
    kind: str = "centroid-distance"

    def __post_init__(self):
        c = np.array(self.costs, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise UsageError("cost matrix must be square")
        if not np.allclose(c, c.T) or np.any(np.diag(c) != 0) or np.any(c < 0):
            raise UsageError("cost matrix must be symmetric, non-negative, zero on the diagonal")
        c = (c + c.T) / 2
        c.setflags(write=False)
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "kind", _KINDS.get(self.kind, self.kind))

    @property
    def m(self) -> int:
        return self.costs.shape[0]

    def __getitem__(self, ij) -> float:
        return float(self.costs[ij])


def cost_matrix_from_centroids(centroids, kind: str = "centroid") -> CostMatrix:
    kind = _KINDS.get(kind)
    if kind is None:
        raise UsageError("cost kind must be 'centroid' or 'random'")
    c = np.asarray(centroids, dtype=np.float64)
    m = len(c)
    if m < 1:
        raise UsageError("need at least one partition")
    if kind == "random-unit":
        return CostMatrix(np.ones((m, m)) - np.eye(m), kind)
    diff = c[:, None, :] - c[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, 0.0)
    return CostMatrix(d, kind)


def build_cost_matrix(partitions: Sequence[VectorSet], kind: str = "centroid") -> CostMatrix:
    """Pairwise merge-cost estimates: unit costs, or centroid distances."""
    if not partitions:
        raise UsageError("need at least one partition")
    for i, p in enumerate(partitions):
        if p.count == 0:
            raise UsageError(f"partition {i} is empty")
    dims = {p.dim for p in partitions}
    if len(dims) > 1:
        raise UsageError(f"dimension mismatch across partitions: {sorted(dims)}")
    return cost_matrix_from_centroids([p.centroid() for p in partitions], kind)


@dataclass
class MergeOrderGraph:
    """Partition-level graph; each edge is one pairwise merge."""

    m: int
    R: int
    delta: float = 2
    edges: list[tuple[int, int]] = field(default_factory=list)
    costs: CostMatrix | None = None
    repair_edges: list[tuple[int, int]] = field(default_factory=list)
    hop: np.ndarray = field(init=False, repr=False)
    _adj: list[set[int]] = field(init=False, repr=False)

    def __post_init__(self):
        if self.m < 0:
            raise UsageError("m must be non-negative")
        self.hop = np.full((self.m, self.m), UNREACHABLE, dtype=np.int64)
        np.fill_diagonal(self.hop, 0)
        self._adj = [set() for _ in range(self.m)]
        edges, self.edges = list(self.edges), []
        for i, j in edges:
            self.add_edge(i, j)

    @property
    def hop_matrix(self) -> np.ndarray:
        return self.hop

    def neighbors(self, v: int) -> set[int]:
        return self._adj[v]

    def degree(self, v: int | None = None):
        if v is None:
            return np.array([len(a) for a in self._adj], dtype=np.int64)
        return len(self._adj[v])

    def has_edge(self, i: int, j: int) -> bool:
        return j in self._adj[i]

    def add_edge(self, i: int, j: int) -> None:
        """Insert an undirected edge and update all-pairs hop counts in place.

        A shortest path after the insertion uses the new edge at most once,
        so every pair is the min of its old count and the two routes through
        (i, j).
        """
        i, j = int(i), int(j)
        if i == j or not (0 <= i < self.m and 0 <= j < self.m):
            raise UsageError(f"invalid edge ({i}, {j}) for m={self.m}")
        if j in self._adj[i]:
            return
        self._adj[i].add(j)
        self._adj[j].add(i)
        self.edges.append((min(i, j), max(i, j)))
        H = self.hop
        via_ij = H[:, i][:, None] + 1 + H[j, :][None, :]
        via_ji = H[:, j][:, None] + 1 + H[i, :][None, :]
        np.minimum(H, np.minimum(via_ij, via_ji), out=H)
        np.minimum(H, UNREACHABLE, out=H)

    def bfs_hops(self) -> np.ndarray:
        """All-pairs hop counts recomputed from scratch."""
        H = np.full((self.m, self.m), UNREACHABLE, dtype=np.int64)
        for s in range(self.m):
            H[s, s] = 0
            queue = deque([s])
            while queue:
                u = queue.popleft()
                for v in self._adj[u]:
                    if H[s, v] == UNREACHABLE:
                        H[s, v] = H[s, u] + 1
                        queue.append(v)
        return H

    def is_connected(self) -> bool:
        return self.m <= 1 or bool((self.hop < UNREACHABLE).all())

    def diameter(self) -> float:
        if self.m <= 1:
            return 0
        d = int(self.hop.max())
        return math.inf if d >= UNREACHABLE else d

    def components(self) -> list[list[int]]:
        seen = np.zeros(self.m, dtype=bool)
        out = []
        for s in range(self.m):
            if not seen[s]:
                comp = sorted(int(v) for v in np.flatnonzero(self.hop[s] < UNREACHABLE))
                seen[comp] = True
                out.append(comp)
        return out

    @property
    def degree_violations(self) -> int:
        """Vertices whose degree exceeds R."""
        return int((self.degree() > self.R).sum())

    def total_cost(self, costs: CostMatrix | None = None) -> float:
        costs = costs or self.costs
        if costs is None:
            return float(len(self.edges))
        return float(sum(costs.costs[i, j] for i, j in self.edges))

    def to_json(self) -> dict:
        delta = self.delta if math.isfinite(self.delta) else None
        return {"m": self.m, "edges": [[i, j] for i, j in sorted(self.edges)],
                "R": self.R, "delta": delta}


def save_plan(plan: MergeOrderGraph, path) -> None:
    with atomic_write(path) as tmp:
        tmp.write_text(json.dumps(plan.to_json()) + "\n")


def load_plan(path, costs: CostMatrix | None = None) -> MergeOrderGraph:
    try:
        raw = json.loads(open(path).read())
        m, R = int(raw["m"]), int(raw["R"])
        delta = math.inf if raw.get("delta") is None else raw["delta"]
        edges = [(int(i), int(j)) for i, j in raw["edges"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed plan file ({exc})") from exc
    if costs is not None and costs.m != m:
        raise UsageError(f"plan has m={m} but cost matrix has {costs.m} partitions")
    try:
        return MergeOrderGraph(m, R, delta, edges, costs)
    except UsageError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- planning ----------------------------------------------------------------


class MOSBuilder:
    """Greedy degree- and diameter-bounded edge insertion with 1-hop relays.

    Exposed as a class so that individual insertion steps can be scripted.
    """

    def __init__(self, costs: CostMatrix, R: int, delta: float = 2):
        if R < 1:
            raise UsageError("R must be >= 1")
        if delta < 1:
            raise UsageError("delta must be >= 1")
        self.costs = costs
        self.C = costs.costs
        self.R = R
        self.delta = delta
        self.graph = MergeOrderGraph(costs.m, R, delta, costs=costs)
        self.skipped: list[tuple[int, int]] = []

    def order(self) -> list[int]:
        """Vertices by ascending mean cost to their R cheapest peers (ties: lower id)."""
        m = self.costs.m
        if m == 1:
            return [0]
        score = np.empty(m)
        for v in range(m):
            peers = np.delete(self.C[v], v)
            score[v] = np.sort(peers)[: self.R].mean()
        return [int(v) for v in np.lexsort((np.arange(m), score))]

    def nearest_far(self, v: int) -> int | None:
        """Cheapest vertex more than ``delta`` hops from ``v`` (ties: lower id)."""
        far = np.flatnonzero(self.graph.hop[v] > self.delta)
        if not len(far):
            return None
        return int(far[np.lexsort((far, self.C[v, far]))[0]])

    def _relay(self, saturated: int, other: int) -> int | None:
        g = self.graph
        best = None
        for w in sorted(g.neighbors(saturated)):
            if g.degree(w) >= self.R or w == other or g.has_edge(w, other):
                continue
            if best is None or self.C[w, other] < self.C[best, other]:
                best = w
        return best

    def connect(self, v: int, x: int) -> tuple[int, int] | None:
        """Try to join ``v`` and ``x``; returns the edge actually added, or None."""
        g, R = self.graph, self.R
        dv, dx = g.degree(v), g.degree(x)
        if dv < R and dx < R:
            edge = (v, x)
        elif dv < R:
            w = self._relay(x, v)
            edge = None if w is None else (v, w)
        elif dx < R:
            w = self._relay(v, x)
            edge = None if w is None else (w, x)
        else:
            edge = None
        if edge is None:
            self.skipped.append((v, x))
            return None
        g.add_edge(*edge)
        return edge

    def main_pass(self) -> None:
        for v in self.order():
            while True:
                x = self.nearest_far(v)
                if x is None or self.connect(v, x) is None:
                    break

    def repair(self) -> None:
        """Join components by their cheapest crossing edges, ignoring R."""
        g = self.graph
        while not g.is_connected():
            comps = g.components()
            label = np.empty(g.m, dtype=np.int64)
            for c, members in enumerate(comps):
                label[members] = c
            best = None
            for i in range(g.m):
                for j in range(i + 1, g.m):
                    if label[i] != label[j]:
                        key = (self.C[i, j], i, j)
                        if best is None or key < best:
                            best = key
            _, i, j = best
            g.add_edge(i, j)
            g.repair_edges.append((i, j))

    def build(self) -> MergeOrderGraph:
        self.main_pass()
        self.repair()
        return self.graph


def mos_plan(costs: CostMatrix, R: int | None = None, delta: float = 2) -> MergeOrderGraph:
    """Connected merge-order graph with degree <= R and diameter <= delta where feasible.

    ``R`` defaults to ``min(4, m - 1)``; pass ``delta=math.inf`` to drop the
    diameter bound. Degree violations can only come from the final repair.
    """
    m = costs.m
    if m < 1:
        raise UsageError("need at least one partition")
    if R is None:
        R = max(1, min(4, m - 1))
    return MOSBuilder(costs, R, delta).build()


def pairwise_plan(m: int, costs: CostMatrix | None = None) -> MergeOrderGraph:
    """Complete graph: every pair merged directly."""
    if m < 1:
        raise UsageError("m must be >= 1")
    edges = [(i, j) for i in range(m) for j in range(i + 1, m)]
    return MergeOrderGraph(m, max(1, m - 1), 1, edges, costs)


def path_plan(costs: CostMatrix) -> MergeOrderGraph:
    """Greedy nearest-neighbor chain starting from the most central vertex."""
    m, C = costs.m, costs.costs
    start = int(np.argmin(C.sum(axis=1)))
    order, left = [start], set(range(m)) - {start}
    while left:
        last = order[-1]
        nxt = min(left, key=lambda j: (C[last, j], j))
        order.append(nxt)
        left.remove(nxt)
    return MergeOrderGraph(m, 2, math.inf, list(zip(order, order[1:])), costs)


def star_plan(costs: CostMatrix) -> MergeOrderGraph:
    """Every vertex joined to the vertex of least total cost."""
    m = costs.m
    hub = int(np.argmin(costs.costs.sum(axis=1)))
    return MergeOrderGraph(m, max(1, m - 1), 2, [(hub, j) for j in range(m) if j != hub], costs)


def mst_plan(costs: CostMatrix) -> MergeOrderGraph:
    """Minimum spanning tree of the cost matrix (scipy)."""
    from scipy.sparse.csgraph import minimum_spanning_tree

    m = costs.m
    # zero costs would read as missing edges; shift them to a tiny positive weight
    w = np.where(costs.costs > 0, costs.costs, 1e-12)
    np.fill_diagonal(w, 0)
    tree = minimum_spanning_tree(w).tocoo()
    edges = sorted((int(min(i, j)), int(max(i, j))) for i, j in zip(tree.row, tree.col))
    return MergeOrderGraph(m, max(1, m - 1), math.inf, edges, costs)


def random_regular_plan(m: int, degree: int, seed: int = 42,
                        costs: CostMatrix | None = None) -> MergeOrderGraph:
    """Connected random ``degree``-regular graph (networkx); degree*m must be even."""
    import networkx as nx

    if degree >= m or (degree * m) % 2:
        raise UsageError(f"no {degree}-regular graph on {m} vertices")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        g = nx.random_regular_graph(degree, m, seed=int(rng.integers(2**31)))
        if m == 1 or nx.is_connected(g):
            edges = sorted((min(i, j), max(i, j)) for i, j in g.edges())
            return MergeOrderGraph(m, degree, math.inf, edges, costs)
    raise UsageError(f"could not draw a connected {degree}-regular graph on {m} vertices")


# -- multi-index merge -------------------------------------------------------


@dataclass
class MultiMergeReport:
    strategy: str
    edges: list[tuple[int, int, MergeReport]] = field(default_factory=list)
    repair_ndc: int = 0
    repair_ms: float = 0.0
    workers: int = 1

    def combined(self) -> MergeReport:
        total = MergeReport(strategy=self.strategy, workers=self.workers)
        for _, _, r in self.edges:
            total += r
        total.repair_ndc += self.repair_ndc
        total.merge_ms += self.repair_ms
        return total

    @property
    def total_ndc(self) -> int:
        return self.combined().total_ndc

    @property
    def wall_ms(self) -> float:
        return self.combined().wall_ms

    @property
    def sliding_ratio(self) -> float:
        return self.combined().sliding_ratio


def edge_schedule(plan: MergeOrderGraph, root: int) -> list[tuple[int, int]]:
    """Spanning edges grown from ``root`` by ascending cost, then the chords."""
    C = plan.costs.costs if plan.costs is not None else np.ones((plan.m, plan.m))
    remaining = {tuple(sorted(e)) for e in plan.edges}
    inside = {root}
    order = []
    while True:
        frontier = [e for e in remaining if (e[0] in inside) != (e[1] in inside)]
        if not frontier:
            break
        e = min(frontier, key=lambda e: (C[e], e))
        order.append(e)
        remaining.remove(e)
        inside.update(e)
    order.extend(sorted(remaining, key=lambda e: (C[e], e)))
    return order


def largest(indexes: Sequence[ProximityGraph]) -> int:
    """Position of the largest index; ties go to the lowest position."""
    return max(range(len(indexes)), key=lambda i: (indexes[i].count, -i))


def multi_merge(indexes: Sequence[ProximityGraph], plan: MergeOrderGraph,
                params: MergeParams | None = None, strategy: str = "rnsm",
                seed: int | None = None, schedule: Iterable[tuple[int, int]] | None = None,
                backend: str | None = None) -> tuple[ProximityGraph, MultiMergeReport]:
    """Cross-link partitions along every plan edge inside one unified graph.

    Searches for edge (i, j) run inside the original index of the larger
    side, so results only ever name that partition's nodes. ``schedule``
    overrides the default edge order (it must cover the same edge set).
    """
    params = params or MergeParams()
    indexes = list(indexes)
    if plan.m != len(indexes):
        raise UsageError(f"plan has m={plan.m} but {len(indexes)} indexes were given")
    report = MultiMergeReport(strategy=strategy, workers=params.workers)
    if not indexes:
        raise UsageError("no indexes to merge")
    dims = {g.dim for g in indexes if g.count}
    if len(dims) > 1:
        raise UsageError(f"dimension mismatch across indexes: {sorted(dims)}")
    if not plan.is_connected():
        raise UsageError("merge plan is disconnected; cannot produce one index")
    if len(indexes) == 1:
        return indexes[0], report
    root = largest(indexes)
    merged, offsets = union_graph(indexes, entry_from=root)
    if schedule is None:
        schedule = edge_schedule(plan, root)
    else:
        schedule = [tuple(e) for e in schedule]
        if sorted(tuple(sorted(e)) for e in schedule) != sorted(tuple(sorted(e)) for e in plan.edges):
            raise UsageError("schedule must list exactly the plan's edges")
    for i, j in schedule:
        a, b = (i, j) if (indexes[i].count, i) <= (indexes[j].count, j) else (j, i)
        r = cross_link(merged, indexes[a], offsets[a], indexes[b], offsets[b], params,
                       strategy, seed, backend)
        report.edges.append((a, b, r))
    t0 = time.perf_counter()
    report.repair_ndc = repair_connectivity(merged, backend=backend)
    report.repair_ms = (time.perf_counter() - t0) * 1e3
    return merged, report


def separated_search(indexes: Sequence[ProximityGraph], query, ef: int, k: int,
                     backend: str | None = None) -> tuple[list[Candidate], SearchStats]:
    """Search each index independently and keep the global top-k (global ids)."""
    kern = _backend.get(backend)
    q = np.ascontiguousarray(query, dtype=np.float32).ravel()
    if k > ef:
        raise UsageError(f"k={k} must not exceed ef={ef}")
    stats = SearchStats()
    pool: list[tuple[float, int]] = []
    t0 = time.perf_counter()
    for g in indexes:
        if g.count == 0:
            continue
        if q.shape[0] != g.dim:
            raise UsageError(f"query dim {q.shape[0]} != index dim {g.dim}")
        vecs, adj, deg = g.arrays()
        ids, d, ndc, hops = kern.search(vecs, adj, deg, q, np.array([g.entry_point], np.int32), ef)
        stats.ndc += int(ndc)
        stats.hops += int(hops)
        gids = g.ids
        pool.extend((float(x), int(gids[v])) for x, v in zip(d[:k], ids[:k]))
    pool.sort()
    stats.elapsed = time.perf_counter() - t0
    return [Candidate(i, math.sqrt(d)) for d, i in pool[:k]], stats


__all__ = [
    "CostMatrix", "MOSBuilder", "MergeOrderGraph", "MultiMergeReport", "build_cost_matrix",
    "cost_matrix_from_centroids", "edge_schedule", "load_plan", "mos_plan", "mst_plan",
    "multi_merge", "pairwise_plan", "path_plan", "random_regular_plan", "save_plan",
    "separated_search", "star_plan",
]
