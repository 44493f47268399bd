"""Random and k-means partitioning with contiguous global id ranges."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pgmerge.errors import FormatError, UsageError
from pgmerge.vecstore import VectorSet, atomic_write, save_fvecs


@dataclass
class PartitionSpec:
    m: int
    kind: str
    seed: int
    assignments: np.ndarray  # partition index per input row
    offsets: list[int] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)  # input rows per partition, in order
    inertia: list[float] = field(default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [len(r) for r in self.rows]

    def manifest(self) -> dict:
        return {
            "m": self.m, "kind": self.kind, "seed": self.seed,
            "partitions": [
                {"file": f"part_{i:03d}.fvecs", "offset": off, "count": len(r),
                 "id_range": [off, off + len(r)], "source_rows": r.tolist()}
                for i, (off, r) in enumerate(zip(self.offsets, self.rows))
            ],
            "inertia": self.inertia,
        }


def _split(vs: VectorSet, assignments: np.ndarray, m: int, kind: str, seed: int,
           order: np.ndarray | None = None) -> tuple[list[VectorSet], PartitionSpec]:
    rows = []
    for i in range(m):
        r = np.flatnonzero(assignments == i)
        if order is not None:
            r = order[np.isin(order, r)]
        rows.append(r)
    parts, offsets, off = [], [], 0
    for r in rows:
        offsets.append(off)
        parts.append(vs.subset(r, ids=np.arange(off, off + len(r), dtype=np.int64)))
        off += len(r)
    spec = PartitionSpec(m, kind, seed, assignments, offsets, rows)
    return parts, spec


def _check(vs: VectorSet, m: int) -> None:
    if m < 1:
        raise UsageError("m must be >= 1")
    if m > vs.count:
        raise UsageError(f"cannot split {vs.count} vectors into {m} partitions")


def partition_random(vs: VectorSet, m: int, seed: int = 42) -> tuple[list[VectorSet], PartitionSpec]:
    """Seeded shuffle dealt round-robin; sizes differ by at most one.

    Partition ``i`` receives global ids ``[offset_i, offset_i + count_i)``.
    """
    _check(vs, m)
    perm = np.random.default_rng(seed).permutation(vs.count)
    assignments = np.empty(vs.count, dtype=np.int64)
    assignments[perm] = np.arange(vs.count) % m
    return _split(vs, assignments, m, "random", seed, order=perm)


def _kmeans_pp(X: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = np.empty((m, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = ((X - centers[0]) ** 2).sum(1)
    for c in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[c] = X[idx]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(1))
    return centers


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # chunked to bound memory; argmin keeps the lower cluster index on ties
    labels = np.empty(len(X), dtype=np.int64)
    dist = np.empty(len(X))
    cn = (centers ** 2).sum(1)
    for s in range(0, len(X), 4096):
        block = X[s:s + 4096]
        d = (block ** 2).sum(1)[:, None] - 2 * block @ centers.T + cn[None, :]
        labels[s:s + 4096] = d.argmin(1)
    diff = X - centers[labels]
    dist[:] = np.einsum("ij,ij->i", diff, diff)
    return labels, dist


def _fix_empty(labels: np.ndarray, dist: np.ndarray, m: int) -> None:
    """Give each empty cluster the farthest point of the current largest cluster."""
    while True:
        counts = np.bincount(labels, minlength=m)
        empty = np.flatnonzero(counts == 0)
        if not len(empty):
            return
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(dist[members])]
        labels[far] = empty[0]
        dist[far] = 0.0


def kmeans(X, m: int, seed: int = 42, max_iters: int = 50, tol: float = 1e-4
           ) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding; returns (centroids, labels, inertia history).

    The history holds the inertia after each assignment step. Stops when no
    centroid moves by ``tol`` or more.
    """
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, m, rng)
    history = []
    labels = None
    for _ in range(max_iters):
        labels, dist = _assign(X, centers)
        _fix_empty(labels, dist, m)
        history.append(float(dist.sum()))
        new = np.zeros_like(centers)
        np.add.at(new, labels, X)
        new /= np.bincount(labels, minlength=m)[:, None]
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    labels, dist = _assign(X, centers)
    _fix_empty(labels, dist, m)
    final = float(dist.sum())
    if final < history[-1]:
        history.append(final)
    return centers, labels, history


def partition_kmeans(vs: VectorSet, m: int, seed: int = 42, max_iters: int = 50
                     ) -> tuple[list[VectorSet], PartitionSpec, np.ndarray]:
    """Cluster with k-means and split by label; also returns the centroids."""
    _check(vs, m)
    centers, labels, history = kmeans(vs.data, m, seed, max_iters)
    parts, spec = _split(vs, labels, m, "kmeans", seed)
    spec.inertia = history
    return parts, spec, centers


def write_partitions(parts: list[VectorSet], spec: PartitionSpec, out_dir,
                     centroids: np.ndarray | None = None, config: dict | None = None) -> Path:
    """Write part_XXX.fvecs, centroids.fvecs and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(parts):
        save_fvecs(p, out / f"part_{i:03d}.fvecs")
    if centroids is None:
        centroids = np.stack([p.centroid() for p in parts])
    save_fvecs(np.asarray(centroids, dtype=np.float32), out / "centroids.fvecs")
    manifest = spec.manifest()
    if config is not None:
        manifest["config"] = config
    with atomic_write(out / "manifest.json") as tmp:
        tmp.write_text(json.dumps(manifest, indent=1) + "\n")
    return out / "manifest.json"


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except ValueError as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc


def manifest_offset(manifest: dict, part_file) -> int:
    """Global id offset recorded for ``part_file`` (matched by file name)."""
    name = Path(part_file).name
    for entry in manifest.get("partitions", []):
        if entry["file"] == name:
            return int(entry["offset"])
    raise UsageError(f"{name} is not listed in the manifest")


def source_rows(manifest: dict) -> np.ndarray:
    """Map global id -> input row, from the manifest's per-partition rows."""
    entries = manifest.get("partitions", [])
    total = sum(int(e["count"]) for e in entries)
    out = np.full(total, -1, dtype=np.int64)
    for e in entries:
        off, rows = int(e["offset"]), np.asarray(e["source_rows"], dtype=np.int64)
        if off + len(rows) > total:
            raise FormatError("manifest id ranges exceed the total count")
        out[off:off + len(rows)] = rows
    if (out < 0).any():
        raise FormatError("manifest id ranges do not cover every global id")
    return out


def global_ids(manifest: dict) -> np.ndarray:
    """Map input row -> global id (inverse of :func:`source_rows`)."""
    rows = source_rows(manifest)
    out = np.empty_like(rows)
    out[rows] = np.arange(len(rows))
    return out


__all__ = ["PartitionSpec", "global_ids", "kmeans", "manifest_offset", "partition_kmeans", "partition_random",
           "read_manifest", "source_rows", "write_partitions"]
