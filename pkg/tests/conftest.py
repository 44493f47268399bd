import contextlib
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pgmerge import _backend, _pykernels  # noqa: E402
from pgmerge.vecstore import VectorSet, gaussian, gaussian_mixture  # noqa: E402

BACKENDS = _backend.available()


@contextlib.contextmanager
def counted_distances(monkeypatch):
    """Count every distance row the Python kernels evaluate."""
    box = {"n": 0}
    real = _pykernels.sqdists

    def wrapped(vecs, ids, q):
        out = real(vecs, ids, q)
        box["n"] += len(out)
        return out

    monkeypatch.setattr(_pykernels, "sqdists", wrapped)
    try:
        yield box
    finally:
        monkeypatch.setattr(_pykernels, "sqdists", real)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_set():
    return gaussian(500, 8, seed=3)


@pytest.fixture(scope="session")
def mixture_2k():
    return gaussian_mixture(2000, 16, 8, seed=5)


def line(points) -> VectorSet:
    return VectorSet(np.asarray(points, dtype=np.float32).reshape(-1, 1))


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for c in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[c])
