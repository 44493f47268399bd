# distutils: language = c++
"""Compiled kernels for graph search, RNG pruning, insertion and cross-linking.

Every routine here has a pure-Python twin in ``_pykernels`` with the same
signature and the same results; ``pgmerge._backend`` picks one at import.

Conventions shared by both backends:

* vectors are a C-contiguous ``float32`` array ``(n, dim)``;
* adjacency is an ``int32`` array ``(rows, max_degree)`` plus an ``int32``
  degree vector; only the first ``deg[u]`` slots of row ``u`` are live;
* distances are squared L2 accumulated in ``float64``;
* ordering is lexicographic on ``(distance, node id)``.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int32_t, int64_t, uint32_t
from libc.stdlib cimport free, malloc
from libc.string cimport memset
from libcpp.algorithm cimport sort
from libcpp.pair cimport pair
from libcpp.vector cimport vector

cnp.import_array()

ctypedef pair[double, int32_t] cand_t

BACKEND_NAME = "cython"


cdef class Visited:
    """Epoch-tagged visited marks, reusable across searches on one thread."""

    cdef uint32_t[::1] tags
    cdef uint32_t epoch

    def __init__(self, Py_ssize_t n=0):
        self.tags = np.zeros(max(n, 1), dtype=np.uint32)
        self.epoch = 0

    def ensure(self, Py_ssize_t n):
        if n > self.tags.shape[0]:
            self.tags = np.zeros(max(n, 2 * self.tags.shape[0]), dtype=np.uint32)
            self.epoch = 0

    cdef uint32_t next_epoch(self) noexcept:
        self.epoch += 1
        if self.epoch == 0:
            memset(&self.tags[0], 0, self.tags.shape[0] * sizeof(uint32_t))
            self.epoch = 1
        return self.epoch


cdef inline double _sqdist(const float* a, const float* b, Py_ssize_t dim) noexcept nogil:
    cdef double s = 0.0
    cdef double t
    cdef Py_ssize_t i
    for i in range(dim):
        t = <double>a[i] - <double>b[i]
        s += t * t
    return s


cdef inline bint _less(double da, int32_t ia, double db, int32_t ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


cdef inline int _pool_insert(double* pd, int32_t* pid, unsigned char* pf, int size, int ef,
                             double d, int32_t v, unsigned char flag) noexcept nogil:
    """Insert into a sorted bounded pool; return the position or -1 if rejected."""
    cdef int lo = 0
    cdef int hi = size
    cdef int mid, j
    if size == ef and not _less(d, v, pd[size - 1], pid[size - 1]):
        return -1
    while lo < hi:
        mid = (lo + hi) >> 1
        if _less(pd[mid], pid[mid], d, v):
            lo = mid + 1
        else:
            hi = mid
    j = size if size < ef else ef - 1
    while j > lo:
        pd[j] = pd[j - 1]
        pid[j] = pid[j - 1]
        pf[j] = pf[j - 1]
        j -= 1
    pd[lo] = d
    pid[lo] = v
    pf[lo] = flag
    return lo


cdef int _search(const float* vecs, Py_ssize_t dim, const int32_t* adj, Py_ssize_t M,
                 const int32_t* deg, const float* q, const int32_t* entries, Py_ssize_t n_entries,
                 int ef, uint32_t* tags, uint32_t tag,
                 double* pd, int32_t* pid, unsigned char* pf,
                 int64_t* ndc, int64_t* hops, vector[cand_t]* visited) noexcept nogil:
    # pf bit 0: expanded, bit 1: seeded entry
    cdef int size = 0
    cdef int k, r, pos, j
    cdef Py_ssize_t i
    cdef int32_t u, v
    cdef double d
    for i in range(n_entries):
        v = entries[i]
        if tags[v] == tag:
            continue
        tags[v] = tag
        d = _sqdist(q, vecs + v * dim, dim)
        ndc[0] += 1
        if visited != NULL:
            visited.push_back(cand_t(d, v))
        pos = _pool_insert(pd, pid, pf, size, ef, d, v, 2)
        if pos >= 0 and size < ef:
            size += 1
    k = 0
    while True:
        while k < size and (pf[k] & 1):
            k += 1
        if k >= size:
            break
        pf[k] |= 1
        if not (pf[k] & 2):
            hops[0] += 1
        u = pid[k]
        r = size
        for j in range(deg[u]):
            v = adj[u * M + j]
            if tags[v] == tag:
                continue
            tags[v] = tag
            d = _sqdist(q, vecs + v * dim, dim)
            ndc[0] += 1
            if visited != NULL:
                visited.push_back(cand_t(d, v))
            pos = _pool_insert(pd, pid, pf, size, ef, d, v, 0)
            if pos >= 0:
                if size < ef:
                    size += 1
                if pos < r:
                    r = pos
        if r < k:
            k = r
    return size


cdef int _prune(const float* vecs, Py_ssize_t dim, int32_t qid, const cand_t* cand,
                Py_ssize_t nc, int M, int32_t* out, int64_t* ndc) noexcept nogil:
    cdef int nk = 0
    cdef Py_ssize_t i, j
    cdef int32_t c
    cdef double dq, dcs
    cdef bint ok
    for i in range(nc):
        if nk >= M:
            break
        c = cand[i].second
        if c == qid or (i > 0 and c == cand[i - 1].second):
            continue
        dq = cand[i].first
        ok = True
        for j in range(nk):
            dcs = _sqdist(vecs + c * dim, vecs + out[j] * dim, dim)
            ndc[0] += 1
            if not (dq < dcs):
                ok = False
                break
        if ok:
            out[nk] = c
            nk += 1
    return nk


cdef void _add_reverse(const float* vecs, Py_ssize_t dim, int32_t* adj, Py_ssize_t M,
                       int32_t* deg, int32_t u, int32_t v, int64_t* ndc,
                       vector[cand_t]* buf, int32_t* tmp) noexcept nogil:
    """Add edge u -> v, re-pruning u's list when it would overflow."""
    cdef int j, nk
    cdef int32_t w
    cdef int32_t* row = adj + u * M
    for j in range(deg[u]):
        if row[j] == v:
            return
    if deg[u] < M:
        row[deg[u]] = v
        deg[u] += 1
        return
    buf.clear()
    for j in range(deg[u]):
        w = row[j]
        buf.push_back(cand_t(_sqdist(vecs + u * dim, vecs + w * dim, dim), w))
    buf.push_back(cand_t(_sqdist(vecs + u * dim, vecs + v * dim, dim), v))
    ndc[0] += deg[u] + 1
    sort(buf.begin(), buf.end())
    nk = _prune(vecs, dim, u, buf.data(), buf.size(), <int>M, tmp, ndc)
    for j in range(nk):
        row[j] = tmp[j]
    deg[u] = nk


cdef int64_t _insert(const float* vecs, Py_ssize_t dim, int32_t* adj, Py_ssize_t M, int32_t* deg,
                     int32_t node, int32_t entry, int ef, uint32_t* tags, uint32_t tag,
                     double* pd, int32_t* pid, unsigned char* pf,
                     vector[cand_t]* visited, vector[cand_t]* buf, int32_t* kept,
                     int32_t* tmp) noexcept nogil:
    cdef int64_t ndc = 0
    cdef int64_t hops = 0
    cdef int nk, j
    deg[node] = 0
    if node == entry:
        return 0
    visited.clear()
    _search(vecs, dim, adj, M, deg, vecs + node * dim, &entry, 1, ef, tags, tag,
            pd, pid, pf, &ndc, &hops, visited)
    sort(visited.begin(), visited.end())
    nk = _prune(vecs, dim, node, visited.data(), visited.size(), <int>M, kept, &ndc)
    for j in range(nk):
        adj[node * M + j] = kept[j]
    deg[node] = nk
    for j in range(nk):
        _add_reverse(vecs, dim, adj, M, deg, kept[j], node, &ndc, buf, tmp)
    return ndc


def sqdist(const float[::1] a, const float[::1] b):
    if a.shape[0] != b.shape[0]:
        raise ValueError("dimension mismatch")
    return _sqdist(&a[0], &b[0], a.shape[0]) if a.shape[0] else 0.0


def search(const float[:, ::1] vecs, const int32_t[:, ::1] adj, const int32_t[::1] deg,
           const float[::1] query, const int32_t[::1] entries, int ef, Visited vis=None,
           bint collect=False):
    """Beam search; returns (ids, sqdists, ndc, hops[, visited_ids, visited_sqdists])."""
    cdef Py_ssize_t n = vecs.shape[0]
    cdef Py_ssize_t dim = vecs.shape[1]
    cdef int64_t ndc = 0
    cdef int64_t hops = 0
    cdef int size = 0
    cdef uint32_t tag
    cdef vector[cand_t] visited
    cdef vector[cand_t]* vp = &visited if collect else NULL
    cdef cnp.ndarray[cnp.float64_t, ndim=1] pd = np.empty(ef + 1, dtype=np.float64)
    cdef cnp.ndarray[cnp.int32_t, ndim=1] pid = np.empty(ef + 1, dtype=np.int32)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] pf = np.empty(ef + 1, dtype=np.uint8)
    if n == 0 or entries.shape[0] == 0:
        empty = (np.empty(0, np.int32), np.empty(0, np.float64), 0, 0)
        return empty + ((np.empty(0, np.int32), np.empty(0, np.float64)) if collect else ())
    if vis is None:
        vis = Visited(n)
    vis.ensure(n)
    tag = vis.next_epoch()
    with nogil:
        size = _search(&vecs[0, 0], dim, &adj[0, 0], adj.shape[1], &deg[0], &query[0],
                       &entries[0], entries.shape[0], ef, &vis.tags[0], tag,
                       <double*>pd.data, <int32_t*>pid.data, <unsigned char*>pf.data,
                       &ndc, &hops, vp)
    out = (pid[:size].copy(), pd[:size].copy(), int(ndc), int(hops))
    if not collect:
        return out
    sort(visited.begin(), visited.end())
    vi = np.empty(visited.size(), dtype=np.int32)
    vd = np.empty(visited.size(), dtype=np.float64)
    cdef int32_t[::1] vi_v = vi
    cdef double[::1] vd_v = vd
    cdef Py_ssize_t i
    for i in range(<Py_ssize_t>visited.size()):
        vd_v[i] = visited[i].first
        vi_v[i] = visited[i].second
    return out + (vi, vd)


def search_batch(const float[:, ::1] vecs, const int32_t[:, ::1] adj, const int32_t[::1] deg,
                 const float[:, ::1] queries, const int32_t[::1] entries, int ef, int k,
                 Visited vis=None):
    """Run one beam search per query; returns (ids[q,k], sqdists[q,k], ndc[q])."""
    cdef Py_ssize_t n = vecs.shape[0]
    cdef Py_ssize_t dim = vecs.shape[1]
    cdef Py_ssize_t nq = queries.shape[0]
    ids = np.full((nq, k), -1, dtype=np.int32)
    dists = np.full((nq, k), np.inf, dtype=np.float64)
    ndcs = np.zeros(nq, dtype=np.int64)
    if n == 0 or nq == 0 or entries.shape[0] == 0:
        return ids, dists, ndcs
    cdef int32_t[:, ::1] ids_v = ids
    cdef double[:, ::1] d_v = dists
    cdef int64_t[::1] ndc_v = ndcs
    cdef double* pd = <double*>malloc((ef + 1) * sizeof(double))
    cdef int32_t* pid = <int32_t*>malloc((ef + 1) * sizeof(int32_t))
    cdef unsigned char* pf = <unsigned char*>malloc((ef + 1) * sizeof(unsigned char))
    cdef Py_ssize_t i, j
    cdef int size
    cdef int64_t ndc, hops
    cdef uint32_t tag
    if vis is None:
        vis = Visited(n)
    vis.ensure(n)
    try:
        for i in range(nq):
            tag = vis.next_epoch()
            ndc = 0
            hops = 0
            with nogil:
                size = _search(&vecs[0, 0], dim, &adj[0, 0], adj.shape[1], &deg[0],
                               &queries[i, 0], &entries[0], entries.shape[0], ef,
                               &vis.tags[0], tag, pd, pid, pf, &ndc, &hops, NULL)
            for j in range(min(size, k)):
                ids_v[i, j] = pid[j]
                d_v[i, j] = pd[j]
            ndc_v[i] = ndc
    finally:
        free(pd)
        free(pid)
        free(pf)
    return ids, dists, ndcs


def prune(const float[:, ::1] vecs, int qid, const int32_t[::1] cand_ids,
          const double[::1] cand_d, int max_degree):
    """RNG occlusion over candidates sorted by (sqdist, id); returns (kept, ndc)."""
    cdef Py_ssize_t nc = cand_ids.shape[0]
    cdef vector[cand_t] cand
    cdef Py_ssize_t i
    cdef int64_t ndc = 0
    cdef int nk = 0
    kept = np.empty(max(max_degree, 1), dtype=np.int32)
    cdef int32_t[::1] kept_v = kept
    for i in range(nc):
        cand.push_back(cand_t(cand_d[i], cand_ids[i]))
    if nc and max_degree > 0:
        nk = _prune(&vecs[0, 0], vecs.shape[1], qid, cand.data(), nc, max_degree, &kept_v[0], &ndc)
    return kept[:nk].copy(), int(ndc)


def insert_range(const float[:, ::1] vecs, int32_t[:, ::1] adj, int32_t[::1] deg,
                 int start, int stop, int entry, int ef, Visited vis=None):
    """Insert nodes start..stop-1 in order (vectors already present); returns NDC."""
    cdef Py_ssize_t n = vecs.shape[0]
    cdef Py_ssize_t dim = vecs.shape[1]
    cdef Py_ssize_t M = adj.shape[1]
    cdef int64_t ndc = 0
    cdef int32_t node
    cdef uint32_t tag
    cdef vector[cand_t] visited
    cdef vector[cand_t] buf
    if stop <= start:
        return 0
    if vis is None:
        vis = Visited(n)
    vis.ensure(n)
    cdef double* pd = <double*>malloc((ef + 1) * sizeof(double))
    cdef int32_t* pid = <int32_t*>malloc((ef + 1) * sizeof(int32_t))
    cdef unsigned char* pf = <unsigned char*>malloc((ef + 1) * sizeof(unsigned char))
    cdef int32_t* kept = <int32_t*>malloc((M + 1) * sizeof(int32_t))
    cdef int32_t* tmp = <int32_t*>malloc((M + 1) * sizeof(int32_t))
    try:
        for node in range(start, stop):
            tag = vis.next_epoch()
            ndc += _insert(&vecs[0, 0], dim, &adj[0, 0], M, &deg[0], node, entry, ef,
                           &vis.tags[0], tag, pd, pid, pf, &visited, &buf, kept, tmp)
    finally:
        free(pd)
        free(pid)
        free(pf)
        free(kept)
        free(tmp)
    return int(ndc)


def update(const float[:, ::1] vecs, int32_t[:, ::1] adj, int32_t[::1] deg, int node,
           const int32_t[::1] cross_ids, const double[::1] cross_d, int k_cross):
    """Merge cross results into node's list, RNG re-prune, add reverse cross edges."""
    cdef Py_ssize_t dim = vecs.shape[1]
    cdef Py_ssize_t M = adj.shape[1]
    cdef int64_t ndc = 0
    cdef vector[cand_t] cand
    cdef vector[cand_t] buf
    cdef Py_ssize_t i, j
    cdef int nk, old_deg = deg[node]
    cdef int32_t w, c
    cdef bint present
    cdef int n_cross = min(k_cross, cross_ids.shape[0])
    if n_cross <= 0:
        return 0
    cdef int32_t* row = &adj[node, 0]
    cdef int32_t* kept = <int32_t*>malloc((M + 1) * sizeof(int32_t))
    cdef int32_t* tmp = <int32_t*>malloc((M + 1) * sizeof(int32_t))
    cdef int32_t* old = <int32_t*>malloc((M + 1) * sizeof(int32_t))
    try:
        for j in range(old_deg):
            w = row[j]
            old[j] = w
            cand.push_back(cand_t(_sqdist(&vecs[node, 0], &vecs[w, 0], dim), w))
        ndc += old_deg
        for i in range(n_cross):
            c = cross_ids[i]
            present = False
            for j in range(old_deg):
                if old[j] == c:
                    present = True
                    break
            if not present:
                cand.push_back(cand_t(cross_d[i], c))
        sort(cand.begin(), cand.end())
        nk = _prune(&vecs[0, 0], dim, node, cand.data(), cand.size(), <int>M, kept, &ndc)
        for j in range(nk):
            row[j] = kept[j]
        deg[node] = nk
        for j in range(nk):
            c = kept[j]
            present = False
            for i in range(old_deg):
                if old[i] == c:
                    present = True
                    break
            if present:
                continue
            for i in range(n_cross):
                if cross_ids[i] == c:
                    _add_reverse(&vecs[0, 0], dim, &adj[0, 0], M, &deg[0], c, node, &ndc,
                                 &buf, tmp)
                    break
    finally:
        free(kept)
        free(tmp)
        free(old)
    return int(ndc)


def expand(const float[:, ::1] vecs, const int32_t[:, ::1] adj, const int32_t[::1] deg,
           int k_plus, int ef, Visited vis=None):
    """Per-node k_plus nearest (excluding self) by beam search seeded at the node."""
    cdef Py_ssize_t n = vecs.shape[0]
    cdef Py_ssize_t dim = vecs.shape[1]
    knn = np.full((n, k_plus), -1, dtype=np.int32)
    if n == 0:
        return knn, 0
    cdef int32_t[:, ::1] knn_v = knn
    cdef double* pd = <double*>malloc((ef + 1) * sizeof(double))
    cdef int32_t* pid = <int32_t*>malloc((ef + 1) * sizeof(int32_t))
    cdef unsigned char* pf = <unsigned char*>malloc((ef + 1) * sizeof(unsigned char))
    cdef int64_t ndc = 0
    cdef int64_t hops = 0
    cdef int32_t v
    cdef int size, j, filled
    cdef uint32_t tag
    if vis is None:
        vis = Visited(n)
    vis.ensure(n)
    try:
        for v in range(n):
            tag = vis.next_epoch()
            with nogil:
                size = _search(&vecs[0, 0], dim, &adj[0, 0], adj.shape[1], &deg[0],
                               &vecs[v, 0], &v, 1, ef, &vis.tags[0], tag,
                               pd, pid, pf, &ndc, &hops, NULL)
            filled = 0
            for j in range(size):
                if filled >= k_plus:
                    break
                if pid[j] == v:
                    continue
                knn_v[v, filled] = pid[j]
                filled += 1
    finally:
        free(pd)
        free(pid)
        free(pf)
    return knn, int(ndc)
