"""The compiled and pure-Python kernels must agree exactly."""
import numpy as np
import pytest

from pgmerge import _backend
from pgmerge.mos import multi_merge, pairwise_plan
from pgmerge.partition import partition_random
from pgmerge.pgraph import beam_search, build_index
from pgmerge.rnsm import MergeParams, expand_neighbors, naive_merge, rnsm_merge
from pgmerge.vecstore import gaussian

pytestmark = pytest.mark.skipif("cython" not in _backend.available(),
                                reason="compiled kernels unavailable")


@pytest.fixture(scope="module")
def data():
    vs = gaussian(600, 6, seed=13)
    parts, _ = partition_random(vs, 3, 13)
    return vs, parts


def test_default_backend_is_compiled():
    assert _backend.BACKEND in ("cython", "python")
    assert _backend.get("python").BACKEND_NAME == "python"
    with pytest.raises(ValueError):
        _backend.get("fortran")


def test_build_identical(data):
    vs, _ = data
    a = build_index(vs, 10, 40, backend="cython")
    b = build_index(vs, 10, 40, backend="python")
    assert a.edges_equal(b) and a.construction_ndc == b.construction_ndc


def test_search_identical(data):
    vs, _ = data
    g = build_index(vs, 10, 40)
    for q in gaussian(20, 6, seed=1).data:
        ra, sa = beam_search(g, q, 32, 10, entries=[0, 3], backend="cython")
        rb, sb = beam_search(g, q, 32, 10, entries=[0, 3], backend="python")
        assert [c.id for c in ra] == [c.id for c in rb]
        np.testing.assert_allclose([c.dist for c in ra], [c.dist for c in rb], rtol=1e-12)
        assert (sa.ndc, sa.hops) == (sb.ndc, sb.hops)


def test_expand_identical(data):
    vs, _ = data
    g = build_index(vs, 10, 40)
    ka, na = expand_neighbors(g, 8, 2, backend="cython")
    kb, nb = expand_neighbors(g, 8, 2, backend="python")
    np.testing.assert_array_equal(ka, kb)
    assert na.ndc == nb.ndc


@pytest.mark.parametrize("merge", [naive_merge, rnsm_merge])
def test_merge_identical(data, merge):
    _, parts = data
    params = MergeParams(k_plus=8, k=3, ef_merge=32, k_cross=6)
    out = {}
    for name in ("cython", "python"):
        a = build_index(parts[0], 10, 40, backend=name)
        b = build_index(parts[1], 10, 40, backend=name)
        out[name] = merge(a, b, params, backend=name)
    (ga, ra), (gb, rb) = out["cython"], out["python"]
    assert ga.edges_equal(gb)
    assert ra.total_ndc == rb.total_ndc


def test_multi_merge_identical(data):
    _, parts = data
    params = MergeParams(k_plus=8, k=3, ef_merge=32, k_cross=6)
    res = []
    for name in ("cython", "python"):
        idx = [build_index(p, 10, 40, backend=name) for p in parts]
        res.append(multi_merge(idx, pairwise_plan(3), params, seed=2, backend=name))
    assert res[0][0].edges_equal(res[1][0])
    assert res[0][1].total_ndc == res[1][1].total_ndc


def test_environment_forces_python_backend():
    import os
    import subprocess
    import sys

    env = dict(os.environ, PGMERGE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import pgmerge; print(pgmerge.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
