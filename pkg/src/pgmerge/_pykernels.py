"""Pure-Python kernels; same signatures and results as the compiled ``_ckernels``.

All distance evaluations go through :func:`sqdists`, so wrapping that one
function counts every distance computation a kernel performs.
"""
from __future__ import annotations

from bisect import bisect_left

import numpy as np

BACKEND_NAME = "python"


class Visited:
    """Placeholder scratch object; the Python kernels use a set per search."""

    def __init__(self, n: int = 0):
        self.n = n

    def ensure(self, n: int) -> None:
        self.n = max(self.n, n)


def sqdists(vecs: np.ndarray, ids, q: np.ndarray) -> np.ndarray:
    """Squared L2 from ``q`` to ``vecs[ids]``, accumulated in float64."""
    diff = vecs[np.asarray(ids, dtype=np.intp)].astype(np.float64) - np.asarray(q, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def sqdist(a, b) -> float:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError("dimension mismatch")
    return float(sqdists(a[None, :], [0], b)[0])


def _search(vecs, adj, deg, q, entries, ef, collect):
    visited: set[int] = set()
    seen: list[tuple[float, int]] = []
    pool: list[tuple[float, int]] = []
    expanded: set[int] = set()
    ndc = 0
    hops = 0

    def offer(items):
        low = len(pool)
        for item in items:
            if len(pool) == ef and not item < pool[-1]:
                continue
            pos = bisect_left(pool, item)
            pool.insert(pos, item)
            if len(pool) > ef:
                pool.pop()
            low = min(low, pos)
        return low

    seeds = []
    for e in entries:
        e = int(e)
        if e not in visited:
            visited.add(e)
            seeds.append(e)
    if seeds:
        d = sqdists(vecs, seeds, q)
        ndc += len(seeds)
        items = [(float(x), v) for x, v in zip(d, seeds)]
        if collect:
            seen.extend(items)
        offer(items)
    entry_set = set(seeds)

    k = 0
    while True:
        while k < len(pool) and pool[k][1] in expanded:
            k += 1
        if k >= len(pool):
            break
        u = pool[k][1]
        expanded.add(u)
        if u not in entry_set:
            hops += 1
        fresh = []
        for v in adj[u, : deg[u]]:
            v = int(v)
            if v not in visited:
                visited.add(v)
                fresh.append(v)
        if not fresh:
            continue
        d = sqdists(vecs, fresh, q)
        ndc += len(fresh)
        items = [(float(x), v) for x, v in zip(d, fresh)]
        if collect:
            seen.extend(items)
        low = offer(items)
        if low < k:
            k = low
    return pool, ndc, hops, seen


def search(vecs, adj, deg, query, entries, ef, vis=None, collect=False):
    """Beam search; returns (ids, sqdists, ndc, hops[, visited_ids, visited_sqdists])."""
    if len(vecs) == 0 or len(entries) == 0:
        out = (np.empty(0, np.int32), np.empty(0, np.float64), 0, 0)
        return out + ((np.empty(0, np.int32), np.empty(0, np.float64)) if collect else ())
    pool, ndc, hops, seen = _search(vecs, adj, deg, query, entries, ef, collect)
    out = (
        np.array([v for _, v in pool], dtype=np.int32),
        np.array([d for d, _ in pool], dtype=np.float64),
        ndc,
        hops,
    )
    if not collect:
        return out
    seen.sort()
    return out + (
        np.array([v for _, v in seen], dtype=np.int32),
        np.array([d for d, _ in seen], dtype=np.float64),
    )


def search_batch(vecs, adj, deg, queries, entries, ef, k, vis=None):
    nq = len(queries)
    ids = np.full((nq, k), -1, dtype=np.int32)
    dists = np.full((nq, k), np.inf, dtype=np.float64)
    ndcs = np.zeros(nq, dtype=np.int64)
    if len(vecs) == 0 or len(entries) == 0:
        return ids, dists, ndcs
    for i in range(nq):
        pool, ndc, _, _ = _search(vecs, adj, deg, queries[i], entries, ef, False)
        for j, (d, v) in enumerate(pool[:k]):
            ids[i, j] = v
            dists[i, j] = d
        ndcs[i] = ndc
    return ids, dists, ndcs


def _prune(vecs, qid, cand, max_degree):
    kept: list[int] = []
    ndc = 0
    prev = None
    for dq, c in cand:
        if len(kept) >= max_degree:
            break
        if c == qid or c == prev:
            prev = c
            continue
        prev = c
        ok = True
        for s in kept:
            dcs = float(sqdists(vecs, [s], vecs[c])[0])
            ndc += 1
            if not dq < dcs:
                ok = False
                break
        if ok:
            kept.append(c)
    return kept, ndc


def prune(vecs, qid, cand_ids, cand_d, max_degree):
    """RNG occlusion over candidates sorted by (sqdist, id); returns (kept, ndc)."""
    cand = [(float(d), int(c)) for d, c in zip(cand_d, cand_ids)]
    kept, ndc = _prune(vecs, int(qid), cand, max_degree)
    return np.array(kept, dtype=np.int32), ndc


def _add_reverse(vecs, adj, deg, u, v):
    row = adj[u]
    if v in row[: deg[u]]:
        return 0
    M = adj.shape[1]
    if deg[u] < M:
        row[deg[u]] = v
        deg[u] += 1
        return 0
    members = [int(w) for w in row[: deg[u]]] + [v]
    d = sqdists(vecs, members, vecs[u])
    ndc = len(members)
    cand = sorted((float(x), w) for x, w in zip(d, members))
    kept, pndc = _prune(vecs, u, cand, M)
    row[: len(kept)] = kept
    deg[u] = len(kept)
    return ndc + pndc


def insert_range(vecs, adj, deg, start, stop, entry, ef, vis=None):
    """Insert nodes start..stop-1 in order (vectors already present); returns NDC."""
    M = adj.shape[1]
    total = 0
    for node in range(start, stop):
        deg[node] = 0
        if node == entry:
            continue
        _, ndc, _, seen = _search(vecs, adj, deg, vecs[node], [entry], ef, True)
        seen.sort()
        kept, pndc = _prune(vecs, node, seen, M)
        ndc += pndc
        adj[node, : len(kept)] = kept
        deg[node] = len(kept)
        for u in kept:
            ndc += _add_reverse(vecs, adj, deg, u, node)
        total += ndc
    return total


def update(vecs, adj, deg, node, cross_ids, cross_d, k_cross):
    """Merge cross results into node's list, RNG re-prune, add reverse cross edges."""
    n_cross = min(k_cross, len(cross_ids))
    if n_cross <= 0:
        return 0
    M = adj.shape[1]
    old = [int(w) for w in adj[node, : deg[node]]]
    ndc = 0
    cand = []
    if old:
        d = sqdists(vecs, old, vecs[node])
        ndc += len(old)
        cand = [(float(x), w) for x, w in zip(d, old)]
    old_set = set(old)
    cross = [int(c) for c in cross_ids[:n_cross]]
    cand.extend((float(d), c) for d, c in zip(cross_d[:n_cross], cross) if c not in old_set)
    cand.sort()
    kept, pndc = _prune(vecs, node, cand, M)
    ndc += pndc
    adj[node, : len(kept)] = kept
    deg[node] = len(kept)
    cross_set = set(cross)
    for c in kept:
        if c in old_set or c not in cross_set:
            continue
        ndc += _add_reverse(vecs, adj, deg, c, node)
    return ndc


def expand(vecs, adj, deg, k_plus, ef, vis=None):
    """Per-node k_plus nearest (excluding self) by beam search seeded at the node."""
    n = len(vecs)
    knn = np.full((n, k_plus), -1, dtype=np.int32)
    total = 0
    for v in range(n):
        pool, ndc, _, _ = _search(vecs, adj, deg, vecs[v], [v], ef, False)
        total += ndc
        row = [u for _, u in pool if u != v][:k_plus]
        knn[v, : len(row)] = row
    return knn, total
