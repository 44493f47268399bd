"""Dense vector sets, L2 distance, fvecs/ivecs I/O and synthetic data."""
from __future__ import annotations

import contextlib
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from pgmerge.errors import FormatError, UsageError


class VectorSet:
    """Immutable row-major collection of float32 vectors with optional global ids.

    An empty set may have ``dim is None``; the dimension is fixed by the first
    :meth:`append`.
    """

    __slots__ = ("_data", "_ids", "_dim")

    def __init__(self, data, ids=None, dim: int | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim == 1 and arr.size == 0:
            arr = arr.reshape(0, dim or 0)
        if arr.ndim != 2:
            raise UsageError("vector data must be two-dimensional")
        if dim is None and arr.shape[0] > 0:
            dim = arr.shape[1]
        if dim is not None:
            if dim <= 0:
                raise UsageError("dim must be positive")
            if arr.shape[0] and arr.shape[1] != dim:
                raise UsageError(f"rows have dim {arr.shape[1]}, expected {dim}")
            if arr.shape[0] == 0:
                arr = arr.reshape(0, dim)
        if ids is not None:
            ids = np.ascontiguousarray(ids, dtype=np.int64)
            if ids.shape != (arr.shape[0],):
                raise UsageError("ids length must equal count")
            if len(np.unique(ids)) != len(ids):
                raise UsageError("ids must be pairwise distinct")
            ids.setflags(write=False)
        arr.setflags(write=False)
        self._data = arr
        self._ids = ids
        self._dim = dim

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def count(self) -> int:
        return self._data.shape[0]

    @property
    def ids(self) -> np.ndarray:
        """Global ids; ``0..count-1`` when none were assigned."""
        if self._ids is None:
            return np.arange(self.count, dtype=np.int64)
        return self._ids

    @property
    def has_ids(self) -> bool:
        return self._ids is not None

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, i: int) -> np.ndarray:
        return self._data[i]

    def __repr__(self) -> str:
        return f"VectorSet(dim={self._dim}, count={self.count})"

    def append(self, rows, ids=None) -> "VectorSet":
        """Return a new set with ``rows`` appended."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float32))
        if self._dim is not None and rows.shape[1] != self._dim:
            raise UsageError(f"cannot append dim {rows.shape[1]} rows to a dim {self._dim} set")
        data = np.concatenate([self._data.reshape(-1, rows.shape[1]), rows])
        if ids is None and self._ids is None:
            new_ids = None
        else:
            extra = np.arange(self.count, self.count + len(rows)) if ids is None else ids
            new_ids = np.concatenate([self.ids, np.asarray(extra, dtype=np.int64)])
        return VectorSet(data, new_ids)

    def subset(self, rows: Sequence[int], ids=None) -> "VectorSet":
        rows = np.asarray(rows, dtype=np.intp)
        return VectorSet(self._data[rows], self.ids[rows] if ids is None else ids, dim=self._dim)

    def with_ids(self, ids) -> "VectorSet":
        return VectorSet(self._data, ids, dim=self._dim)

    def centroid(self) -> np.ndarray:
        if self.count == 0:
            raise UsageError("centroid of an empty set")
        return self._data.astype(np.float64).mean(axis=0)

    @classmethod
    def concat(cls, sets: Iterable["VectorSet"]) -> "VectorSet":
        sets = list(sets)
        dims = {s.dim for s in sets if s.dim is not None}
        if len(dims) > 1:
            raise UsageError(f"dimension mismatch across sets: {sorted(dims)}")
        dim = dims.pop() if dims else None
        if not sets:
            return cls(np.empty((0, 0), np.float32))
        data = np.concatenate([s.data.reshape(-1, dim or 0) for s in sets])
        ids = np.concatenate([s.ids for s in sets])
        return cls(data, ids, dim=dim)


@dataclass(frozen=True)
class GroundTruth:
    """Exact neighbor ids per query, nearest first."""

    neighbors: np.ndarray  # (query_count, k) int64

    def __post_init__(self):
        nb = np.asarray(self.neighbors, dtype=np.int64)
        if nb.ndim != 2:
            raise UsageError("ground truth must be a (queries, k) array")
        for row in nb:
            if len(np.unique(row)) != len(row):
                raise UsageError("ground-truth rows must hold distinct ids")
        object.__setattr__(self, "neighbors", nb)

    @property
    def query_count(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UsageError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return a, b


def l2_distance(a, b) -> float:
    """Euclidean distance, accumulated in float64."""
    a, b = _check_pair(a, b)
    diff = a - b
    return math.sqrt(float(diff @ diff))


def l2_distance_reference(a, b) -> float:
    """Scalar-loop Euclidean distance used as an oracle for faster kernels."""
    a, b = _check_pair(a, b)
    s = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        s += (x - y) * (x - y)
    return math.sqrt(s)


def sq_l2_to_many(data: np.ndarray, q) -> np.ndarray:
    """Squared distances from ``q`` to every row of ``data`` (float64)."""
    diff = np.asarray(data, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


# -- files -------------------------------------------------------------------


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike) -> Iterator[Path]:
    """Yield a temp path beside ``path``; rename over it only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _read_records(path, dtype) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw:
        return np.empty((0, 0), dtype=dtype)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    dim = int(np.frombuffer(raw[:4], dtype="<i4")[0])
    if dim < 0:
        raise FormatError(f"{path}: negative record length {dim}")
    rec = 4 * (dim + 1)
    if len(raw) % rec:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of record size {rec} "
                          "(truncated file or inconsistent dims)")
    table = np.frombuffer(raw, dtype="<i4").reshape(-1, dim + 1)
    if not (table[:, 0] == dim).all():
        bad = int(np.flatnonzero(table[:, 0] != dim)[0])
        raise FormatError(f"{path}: record {bad} has dim {table[bad, 0]}, expected {dim}")
    return table[:, 1:].view(dtype)


def load_fvecs(path) -> VectorSet:
    """Read little-endian fvecs; ids are 0..count-1."""
    rows = _read_records(path, "<f4")
    if rows.size == 0 and rows.shape[0] == 0:
        return VectorSet(np.empty((0, 0), np.float32))
    if rows.shape[1] == 0:
        raise FormatError(f"{path}: zero-dimensional vectors")
    return VectorSet(rows.astype(np.float32), np.arange(rows.shape[0], dtype=np.int64))


def save_fvecs(vs: VectorSet | np.ndarray, path) -> None:
    data = vs.data if isinstance(vs, VectorSet) else np.asarray(vs, dtype=np.float32)
    data = np.ascontiguousarray(data, dtype="<f4")
    with atomic_write(path) as tmp:
        if data.shape[0] == 0:
            tmp.write_bytes(b"")
            return
        table = np.empty((data.shape[0], data.shape[1] + 1), dtype="<i4")
        table[:, 0] = data.shape[1]
        table[:, 1:] = data.view("<i4")
        tmp.write_bytes(table.tobytes())


def load_ivecs(path) -> list[np.ndarray]:
    """Read ivecs as a list of int32 rows; rows may differ in length."""
    raw = Path(path).read_bytes()
    try:
        table = _read_records(path, "<i4")
        return [r.astype(np.int32) for r in table]
    except FormatError:
        pass
    rows, pos = [], 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise FormatError(f"{path}: truncated record header at byte {pos}")
        n = int(np.frombuffer(raw[pos:pos + 4], dtype="<i4")[0])
        end = pos + 4 + 4 * n
        if n < 0 or end > len(raw):
            raise FormatError(f"{path}: truncated record at byte {pos}")
        rows.append(np.frombuffer(raw[pos + 4:end], dtype="<i4").astype(np.int32))
        pos = end
    return rows


def save_ivecs(rows, path) -> None:
    """Write integer rows (2-D array or ragged list) as ivecs."""
    chunks = []
    for row in rows:
        row = np.asarray(row)
        if row.size and (row.min() < np.iinfo(np.int32).min or row.max() > np.iinfo(np.int32).max):
            raise UsageError("ivecs values must fit in int32")
        chunks.append(np.asarray([len(row)], dtype="<i4").tobytes())
        chunks.append(row.astype("<i4").tobytes())
    with atomic_write(path) as tmp:
        tmp.write_bytes(b"".join(chunks))


def load_groundtruth(path) -> GroundTruth:
    rows = load_ivecs(path)
    if not rows:
        return GroundTruth(np.empty((0, 0), np.int64))
    if len({len(r) for r in rows}) != 1:
        raise FormatError(f"{path}: ground-truth rows differ in length")
    return GroundTruth(np.stack(rows).astype(np.int64))


def save_groundtruth(gt: GroundTruth, path) -> None:
    save_ivecs(gt.neighbors, path)


# -- synthetic data ----------------------------------------------------------


def gaussian(n: int, dim: int, seed: int = 42) -> VectorSet:
    """Isotropic standard normal vectors."""
    rng = np.random.default_rng(seed)
    return VectorSet(rng.standard_normal((n, dim), dtype=np.float32))


def gaussian_mixture(n: int, dim: int, clusters: int, seed: int = 42,
                     spread: float = 4.0, return_labels: bool = False,
                     centers_seed: int | None = None):
    """Mixture of ``clusters`` unit-variance blobs with N(0, spread^2) centers.

    ``centers_seed`` fixes the blob centers independently of the sample
    seed, so queries can be drawn from the same mixture as the base set.
    """
    if clusters < 1:
        raise UsageError("clusters must be >= 1")
    crng = np.random.default_rng(seed if centers_seed is None else centers_seed)
    centers = crng.normal(0.0, spread, size=(clusters, dim))
    rng = crng if centers_seed is None else np.random.default_rng(seed)
    labels = rng.integers(0, clusters, size=n)
    data = (centers[labels] + rng.standard_normal((n, dim))).astype(np.float32)
    vs = VectorSet(data)
    return (vs, labels) if return_labels else vs


def normalize_rows(vs: VectorSet) -> VectorSet:
    """Project every vector onto the unit sphere (zero rows stay zero)."""
    x = vs.data.astype(np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return VectorSet(np.where(norm > 0, x / np.where(norm > 0, norm, 1), 0.0),
                     vs.ids if vs.has_ids else None, dim=vs.dim)


def generate(n: int, dim: int, clusters: int = 0, seed: int = 42, normalize: bool = False,
             centers_seed: int | None = None) -> VectorSet:
    """Gaussian data; ``clusters > 0`` selects the mixture model.

    ``normalize`` gives unit-norm (DEEP-like) vectors.
    """
    if n < 0 or dim < 1:
        raise UsageError("n must be >= 0 and dim >= 1")
    if clusters > 0:
        vs = gaussian_mixture(n, dim, clusters, seed, centers_seed=centers_seed)
    else:
        vs = gaussian(n, dim, seed)
    return normalize_rows(vs) if normalize else vs
