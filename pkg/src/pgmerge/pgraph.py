"""Flat proximity-graph index: beam search, RNG pruning, incremental build, I/O."""
from __future__ import annotations

import math
import struct
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from pgmerge import _backend, _pykernels
from pgmerge.errors import FormatError, UsageError
from pgmerge.vecstore import VectorSet, atomic_write

INDEX_MAGIC = b"PGMG"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIQIQ")


class Candidate(NamedTuple):
    id: int
    dist: float


@dataclass
class SearchStats:
    ndc: int = 0
    hops: int = 0
    elapsed: float = 0.0

    def __iadd__(self, other: "SearchStats") -> "SearchStats":
        self.ndc += other.ndc
        self.hops += other.hops
        self.elapsed += other.elapsed
        return self


class ProximityGraph:
    """Single-layer graph index over its own copy of the vectors.

    Node ``v`` is a row index; ``ids[v]`` is its global id. Adjacency lives in
    a fixed-width ``int32`` table with a per-node degree, grown by doubling.
    """

    def __init__(self, dim: int | None, max_degree: int = 16, ef_construction: int = 100):
        if max_degree < 1:
            raise UsageError("max_degree must be >= 1")
        if ef_construction < 1:
            raise UsageError("ef_construction must be >= 1")
        self.dim = dim
        self.max_degree = int(max_degree)
        self.ef_construction = int(ef_construction)
        self.entry_point: int | None = None
        self.count = 0
        self.construction_ndc = 0
        self._vecs = np.zeros((0, dim or 0), dtype=np.float32)
        self._adj = np.zeros((0, self.max_degree), dtype=np.int32)
        self._deg = np.zeros(0, dtype=np.int32)
        self._ids = np.zeros(0, dtype=np.int64)

    def __repr__(self) -> str:
        return (f"ProximityGraph(count={self.count}, dim={self.dim}, "
                f"max_degree={self.max_degree}, entry_point={self.entry_point})")

    def __len__(self) -> int:
        return self.count

    def reserve(self, n: int) -> None:
        cap = self._vecs.shape[0]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap, 16)
        vecs = np.zeros((new_cap, self.dim or 0), dtype=np.float32)
        adj = np.zeros((new_cap, self.max_degree), dtype=np.int32)
        deg = np.zeros(new_cap, dtype=np.int32)
        ids = np.zeros(new_cap, dtype=np.int64)
        vecs[:cap] = self._vecs
        adj[:cap] = self._adj
        deg[:cap] = self._deg
        ids[:cap] = self._ids
        self._vecs, self._adj, self._deg, self._ids = vecs, adj, deg, ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vecs[: self.count]

    @property
    def ids(self) -> np.ndarray:
        return self._ids[: self.count]

    @property
    def degrees(self) -> np.ndarray:
        return self._deg[: self.count]

    def neighbors(self, v: int) -> np.ndarray:
        return self._adj[v, : self._deg[v]]

    @property
    def adjacency(self) -> list[np.ndarray]:
        return [self._adj[v, : self._deg[v]].copy() for v in range(self.count)]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views (vectors, adjacency table, degrees) handed to the kernels."""
        n = self.count
        return self._vecs[:n], self._adj[:n], self._deg[:n]

    def set_neighbors(self, v: int, nbrs: Sequence[int]) -> None:
        nbrs = np.asarray(nbrs, dtype=np.int32)
        if len(nbrs) > self.max_degree:
            raise UsageError(f"node {v}: {len(nbrs)} neighbors exceed max_degree")
        self._adj[v, : len(nbrs)] = nbrs
        self._deg[v] = len(nbrs)

    def vector_set(self) -> VectorSet:
        return VectorSet(self.vectors.copy(), self.ids.copy(), dim=self.dim)

    def copy(self) -> "ProximityGraph":
        g = ProximityGraph(self.dim, self.max_degree, self.ef_construction)
        g.reserve(self.count)
        n = self.count
        g._vecs[:n] = self._vecs[:n]
        g._adj[:n] = self._adj[:n]
        g._deg[:n] = self._deg[:n]
        g._ids[:n] = self._ids[:n]
        g.count = n
        g.entry_point = self.entry_point
        g.construction_ndc = self.construction_ndc
        return g

    def with_max_degree(self, max_degree: int) -> "ProximityGraph":
        """Copy with a wider adjacency table (existing lists are kept)."""
        if max_degree < self.max_degree:
            raise UsageError("cannot shrink max_degree without pruning")
        g = ProximityGraph(self.dim, max_degree, self.ef_construction)
        g.reserve(self.count)
        n = self.count
        g._vecs[:n] = self._vecs[:n]
        g._adj[:n, : self.max_degree] = self._adj[:n]
        g._deg[:n] = self._deg[:n]
        g._ids[:n] = self._ids[:n]
        g.count = n
        g.entry_point = self.entry_point
        return g

    def edges_equal(self, other: "ProximityGraph") -> bool:
        if (self.count, self.max_degree, self.entry_point) != (other.count, other.max_degree,
                                                               other.entry_point):
            return False
        if not np.array_equal(self.degrees, other.degrees):
            return False
        if not np.array_equal(self.ids, other.ids):
            return False
        return all(np.array_equal(self.neighbors(v), other.neighbors(v)) for v in range(self.count))


def union_graph(graphs: Sequence[ProximityGraph], entry_from: int | None = None
                ) -> tuple[ProximityGraph, list[int]]:
    """Disjoint union (no cross edges); returns the graph and per-part row offsets.

    The entry point is taken from part ``entry_from`` (default: the largest,
    lowest index on ties).
    """
    if not graphs:
        raise UsageError("need at least one graph")
    dims = {g.dim for g in graphs if g.count}
    if len(dims) > 1:
        raise UsageError(f"dimension mismatch across indexes: {sorted(dims)}")
    dim = dims.pop() if dims else graphs[0].dim
    M = max(g.max_degree for g in graphs)
    out = ProximityGraph(dim, M, max(g.ef_construction for g in graphs))
    total = sum(g.count for g in graphs)
    out.reserve(total)
    offsets, off = [], 0
    for g in graphs:
        n = g.count
        offsets.append(off)
        out._vecs[off:off + n] = g.vectors
        out._ids[off:off + n] = g.ids
        out._deg[off:off + n] = g.degrees
        out._adj[off:off + n, : g.max_degree] = g._adj[:n] + off
        off += n
    out.count = total
    if len(np.unique(out.ids)) != total:
        raise UsageError("global ids overlap across indexes")
    if entry_from is None:
        sizes = [g.count for g in graphs]
        entry_from = sizes.index(max(sizes))
    src = graphs[entry_from]
    out.entry_point = None if src.entry_point is None else src.entry_point + offsets[entry_from]
    return out, offsets


# -- search and pruning ------------------------------------------------------


def _as_entries(graph: ProximityGraph, entries) -> np.ndarray:
    if entries is None:
        entries = [] if graph.entry_point is None else [graph.entry_point]
    arr = np.asarray(list(entries), dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= graph.count):
        raise UsageError(f"entry ids out of range for a graph of {graph.count} nodes")
    return arr.astype(np.int32)


def _as_query(graph: ProximityGraph, query) -> np.ndarray:
    q = np.ascontiguousarray(query, dtype=np.float32).ravel()
    if graph.dim is not None and q.shape[0] != graph.dim:
        raise UsageError(f"query dim {q.shape[0]} != index dim {graph.dim}")
    return q


def beam_search(graph: ProximityGraph, query, ef: int, k: int, entries=None,
                backend: str | None = None) -> tuple[list[Candidate], SearchStats]:
    """Best-first search keeping the ``ef`` closest discovered nodes.

    Returns up to ``k`` candidates sorted by (distance, id). ``entries``
    defaults to the graph's entry point. ``hops`` counts expanded nodes that
    were not entries.
    """
    if k < 1 or ef < 1:
        raise UsageError("k and ef must be positive")
    if k > ef:
        raise UsageError(f"k={k} exceeds ef={ef}")
    if graph.count == 0:
        return [], SearchStats()
    q = _as_query(graph, query)
    ent = _as_entries(graph, entries)
    if ent.size == 0:
        raise UsageError("at least one entry point is required")
    kern = _backend.get(backend)
    vecs, adj, deg = graph.arrays()
    t0 = time.perf_counter()
    ids, d, ndc, hops = kern.search(vecs, adj, deg, q, ent, ef)
    elapsed = time.perf_counter() - t0
    cands = [Candidate(int(i), math.sqrt(x)) for i, x in zip(ids[:k], d[:k])]
    return cands, SearchStats(ndc=ndc, hops=hops, elapsed=elapsed)


def prune_rng(vectors, query_id: int, candidates: Sequence[Candidate], max_degree: int,
              backend: str | None = None) -> list[int]:
    """Relative-neighborhood occlusion over ascending candidates.

    ``c`` is kept iff ``d(c, q) < d(c, s)`` for every already-kept ``s``;
    at most ``max_degree`` ids are returned, nearest first.
    """
    vecs = vectors.vectors if isinstance(vectors, ProximityGraph) else vectors
    vecs = np.ascontiguousarray(vecs.data if isinstance(vecs, VectorSet) else vecs,
                                dtype=np.float32)
    if not len(candidates) or max_degree < 1:
        return []
    kern = _backend.get(backend)
    ids = np.array([c.id for c in candidates], dtype=np.int32)
    # squared distances recomputed in the kernels' own arithmetic
    q = vecs[query_id]
    sq = np.array([kern.sqdist(np.ascontiguousarray(vecs[i]), q) for i in ids], dtype=np.float64)
    order = np.lexsort((ids, sq))
    kept, _ = kern.prune(vecs, int(query_id), ids[order], sq[order], int(max_degree))
    return [int(x) for x in kept]


# -- construction ------------------------------------------------------------


def build_index(vs: VectorSet, max_degree: int = 16, ef_construction: int = 100,
                seed: int = 42, backend: str | None = None) -> ProximityGraph:
    """Insert every vector in row order; node 0 is the fixed entry point.

    Construction is fully deterministic, so ``seed`` does not change the
    result; it is accepted so that pipelines can record one value throughout.
    """
    g = ProximityGraph(vs.dim, max_degree, ef_construction)
    n = vs.count
    if n == 0:
        return g
    g.reserve(n)
    g._vecs[:n] = vs.data
    g._ids[:n] = vs.ids
    g.count = n
    g.entry_point = 0
    kern = _backend.get(backend)
    vecs, adj, deg = g.arrays()
    g.construction_ndc = int(kern.insert_range(vecs, adj, deg, 0, n, 0, ef_construction))
    g.construction_ndc += repair_connectivity(g, backend=backend)
    return g


def insert_node(graph: ProximityGraph, vector, ef_construction: int | None = None,
                global_id: int | None = None, backend: str | None = None) -> int:
    """Insert one vector with the build procedure; returns its node id."""
    v = np.ascontiguousarray(vector, dtype=np.float32).ravel()
    if graph.dim is None:
        graph.dim = v.shape[0]
        graph._vecs = np.zeros((graph._vecs.shape[0], graph.dim), dtype=np.float32)
    elif v.shape[0] != graph.dim:
        raise UsageError(f"vector dim {v.shape[0]} != index dim {graph.dim}")
    ef = graph.ef_construction if ef_construction is None else ef_construction
    node = graph.count
    graph.reserve(node + 1)
    graph._vecs[node] = v
    graph._ids[node] = node if global_id is None else global_id
    graph._deg[node] = 0
    graph.count = node + 1
    if graph.entry_point is None:
        graph.entry_point = node
        return node
    kern = _backend.get(backend)
    vecs, adj, deg = graph.arrays()
    graph.construction_ndc += int(kern.insert_range(vecs, adj, deg, node, node + 1,
                                                    graph.entry_point, ef))
    return node


def repair_connectivity(graph: ProximityGraph, ef: int | None = None,
                        backend: str | None = None) -> int:
    """Link every node unreachable from the entry point back in; returns NDC.

    Reverse-edge re-pruning can drop the last in-edge of a node. For each
    such node (ascending id) a search from the entry point finds its nearest
    reachable nodes; the first one with spare degree gets an edge to it.
    When all of them are full, the nearest one trades its farthest neighbor
    for the orphan and reachability is recomputed.
    """
    n = graph.count
    if n <= 1:
        return 0
    kern = _backend.get(backend)
    vecs, adj, deg = graph.arrays()
    M = graph.max_degree
    ef = graph.ef_construction if ef is None else ef
    entry = np.array([graph.entry_point], dtype=np.int32)
    vis = kern.Visited(n)
    mask = reachable(graph)
    ndc = 0
    for _ in range(n):
        orphans = np.flatnonzero(~mask)
        if not len(orphans):
            break
        evicted = False
        for u in orphans:
            u = int(u)
            if mask[u]:
                continue
            ids, _, sndc, _ = kern.search(vecs, adj, deg, vecs[u], entry, ef, vis)
            ndc += int(sndc)
            spare = [int(r) for r in ids if deg[r] < M]
            if spare:
                r = spare[0]
                adj[r, deg[r]] = u
                deg[r] += 1
            else:
                r = int(ids[0])
                row = adj[r, :M]
                far = int(np.argmax(_pykernels.sqdists(vecs, row, vecs[r])))
                ndc += M
                row[far] = u
                evicted = True
            _mark_from(graph, u, mask)
            if evicted:
                break
        if evicted:
            mask = reachable(graph)
    return ndc


def _mark_from(graph: ProximityGraph, start: int, seen: np.ndarray) -> None:
    if seen[start]:
        return
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if not seen[v]:
                seen[v] = True
                queue.append(int(v))


# -- validation --------------------------------------------------------------


def reachable(graph: ProximityGraph, start: int | None = None) -> np.ndarray:
    """Boolean mask of nodes reachable from ``start`` (default: entry point)."""
    seen = np.zeros(graph.count, dtype=bool)
    start = graph.entry_point if start is None else start
    if start is not None:
        _mark_from(graph, int(start), seen)
    return seen


def validate(graph: ProximityGraph) -> list[str]:
    """Return a list of invariant violations (empty when the graph is well-formed)."""
    problems = []
    n = graph.count
    if n and (graph.entry_point is None or not 0 <= graph.entry_point < n):
        problems.append(f"entry point {graph.entry_point} invalid")
    for v in range(n):
        nb = graph.neighbors(v)
        if len(nb) > graph.max_degree:
            problems.append(f"node {v}: degree {len(nb)} > {graph.max_degree}")
        if len(nb) and (nb.min() < 0 or nb.max() >= n):
            problems.append(f"node {v}: neighbor id out of range")
        if (nb == v).any():
            problems.append(f"node {v}: self loop")
        if len(np.unique(nb)) != len(nb):
            problems.append(f"node {v}: duplicate neighbors")
    if len(np.unique(graph.ids)) != n:
        problems.append("global ids are not distinct")
    return problems


# -- file format -------------------------------------------------------------


def index_to_bytes(graph: ProximityGraph) -> bytes:
    n = graph.count
    dim = graph.dim or 0
    entry = graph.entry_point if graph.entry_point is not None else 0
    parts = [_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, dim, n, graph.max_degree, entry)]
    deg = graph.degrees
    for v in range(n):
        parts.append(struct.pack("<I", int(deg[v])))
        parts.append(graph.neighbors(v).astype("<u8").tobytes())
    parts.append(graph.ids.astype("<i8").tobytes())
    parts.append(np.ascontiguousarray(graph.vectors, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", graph.ef_construction))
    return b"".join(parts)


def index_from_bytes(raw: bytes, name: str = "<bytes>") -> ProximityGraph:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{name}: truncated header")
    magic, version, dim, n, M, entry = _HEADER.unpack_from(raw, 0)
    if magic != INDEX_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if M < 1:
        raise FormatError(f"{name}: max_degree must be positive")
    g = ProximityGraph(dim if dim else None, M)
    g.reserve(n)
    pos = _HEADER.size
    try:
        for v in range(n):
            (d,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if d > M:
                raise FormatError(f"{name}: node {v} degree {d} exceeds max_degree {M}")
            nb = np.frombuffer(raw, dtype="<u8", count=d, offset=pos)
            pos += 8 * d
            if d and nb.max() >= n:
                raise FormatError(f"{name}: node {v} has neighbor out of range")
            g._adj[v, :d] = nb
            g._deg[v] = d
        g._ids[:n] = np.frombuffer(raw, dtype="<i8", count=n, offset=pos)
        pos += 8 * n
        g._vecs[:n] = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=pos).reshape(n, dim)
        pos += 4 * n * dim
        (g.ef_construction,) = struct.unpack_from("<I", raw, pos)
        pos += 4
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{name}: truncated index body ({exc})") from exc
    if pos != len(raw):
        raise FormatError(f"{name}: {len(raw) - pos} trailing bytes")
    g.count = n
    if n:
        if entry >= n:
            raise FormatError(f"{name}: entry point {entry} out of range")
        g.entry_point = int(entry)
    return g


def save_index(graph: ProximityGraph, path) -> None:
    with atomic_write(path) as tmp:
        tmp.write_bytes(index_to_bytes(graph))


def load_index(path) -> ProximityGraph:
    path = Path(path)
    return index_from_bytes(path.read_bytes(), str(path))
