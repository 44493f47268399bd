import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import counted_distances, line
from oracles import brute_knn, exhaustive_dps, is_dominating, min_dominating_size, ref_prune
from pgmerge.errors import UsageError
from pgmerge.evaluation import bench_search, brute_force_knn
from pgmerge.partition import partition_random
from pgmerge.pgraph import Candidate, build_index, reachable, validate
from pgmerge.rnsm import (MergeParams, PivotPlan, build_reverse_index, dps_cost, expand_neighbors,
                          naive_merge, rnsm_merge, select_pivots, update_graph)
from pgmerge.vecstore import VectorSet, gaussian, gaussian_mixture


def star():
    angles = np.arange(5) * 2 * np.pi / 5
    pts = np.vstack([[0.0, 0.0], np.c_[np.cos(angles), np.sin(angles)]])
    return VectorSet(pts)


def split(vs, m=2, seed=0, M=16, efc=100, backend=None):
    parts, _ = partition_random(vs, m, seed)
    return parts, [build_index(p, M, efc, backend=backend) for p in parts]


def recall(graph, queries, truth, ef):
    return bench_search(graph, queries, truth, [ef], 10)[0].recall_at_k


# -- phases 1 and 2 ----------------------------------------------------------


def test_expand_collinear():
    g = build_index(line([0.0, 1.0, 3.0]), 4, 8)
    knn, _ = expand_neighbors(g, 2)
    assert knn.tolist() == [[1, 2], [0, 2], [1, 0]]


def test_expand_overlap_with_exact(small_set):
    g = build_index(small_set, 16, 100)
    knn, stats = expand_neighbors(g, 20)
    exact = [brute_knn(small_set.data, small_set[v], 21)[1:] for v in range(small_set.count)]
    overlap = np.mean([len(set(a) & set(b)) / 20 for a, b in zip(knn, exact)])
    assert overlap >= 0.9
    assert stats.ndc > 0


def test_expand_single_neighbor(small_set):
    g = build_index(small_set, 16, 100)
    knn, _ = expand_neighbors(g, 1)
    assert knn.shape == (small_set.count, 1)
    d = np.linalg.norm(small_set.data - small_set.data[knn[:, 0]], axis=1)
    assert (knn[:, 0] != np.arange(small_set.count)).all() and (d > 0).all()


def test_expand_rejects_large_k():
    g = build_index(line([0.0, 1.0, 3.0]), 4, 8)
    with pytest.raises(UsageError):
        expand_neighbors(g, 3)


def test_reverse_index_mutual_pair():
    ri = build_reverse_index([[1], [0]], 1)
    assert [r.tolist() for r in ri.rnn] == [[1], [0]]


def test_reverse_index_star():
    g = build_index(star(), 8, 16)
    knn, _ = expand_neighbors(g, 2)
    ri = build_reverse_index(knn, 1)
    counts = ri.rnn_count
    assert counts[0] == 5
    # the centroid's own nearest satellite is the only other reverse neighbor
    assert counts[1:].sum() == 1 and counts[knn[0, 0]] == 1
    plan = select_pivots(ri)
    assert plan.pivots == [0]
    assert plan.assignment == {y: 0 for y in range(1, 6)}
    assert dps_cost(plan, star(), 10.0) == pytest.approx(15.0)


knn_lists = st.integers(2, 30).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(1, min(5, n - 1)), st.integers(0, 10_000)))


def random_knn(n, k, seed):
    rng = np.random.default_rng(seed)
    return [rng.choice(np.delete(np.arange(n), v), k, replace=False).tolist() for v in range(n)]


@settings(max_examples=60, deadline=None)
@given(knn_lists)
def test_reverse_index_and_pivot_invariants(args):
    n, k, seed = args
    knn = random_knn(n, k, seed)
    ri = build_reverse_index(knn, k)
    assert ri.rnn_count.sum() == n * k
    for y in range(n):
        for x in ri.knn[y]:
            assert y in ri.rnn[x]
    for x in range(n):
        for y in ri.rnn[x]:
            assert x in ri.knn[y]
    plan = select_pivots(ri)
    assert len(plan.pivots) + len(plan.assignment) == n
    assert plan.covered.all()
    assert set(plan.pivots).isdisjoint(plan.assignment)
    for y, p in plan.assignment.items():
        assert p in ri.knn[y]
    counts = ri.rnn_count[plan.pivots]
    assert (np.diff(counts) <= 0).all()
    assert is_dominating(knn, set(plan.pivots))


def test_singleton_pivot_plan():
    plan = select_pivots(build_reverse_index([[]], 1))
    assert plan.pivots == [0] and plan.assignment == {}


def test_dps_cost_cases():
    vs = gaussian(6, 2)
    all_pivots = PivotPlan(list(range(6)), {}, np.ones(6, bool))
    assert dps_cost(all_pivots, vs, 2.5) == 15.0
    with pytest.raises(UsageError):
        dps_cost(PivotPlan([0], {}, np.array([True] + [False] * 5)), vs, 1.0)


@pytest.mark.parametrize("seed", range(6))
def test_dps_reduction_to_min_dominating_set(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 11))
    knn = random_knn(n, 2, seed)
    cost, pivots = exhaustive_dps(knn, lambda a, b: 1.0, gamma=n + 1)
    assert len(pivots) == min_dominating_size(knn)
    plan = select_pivots(build_reverse_index(knn, 2))
    assert is_dominating(knn, set(plan.pivots))


def _dps_ratios(scale, seeds=range(30)):
    ratios = []
    for seed in seeds:
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(5, 11))
        pts = rng.standard_normal((n, 2))
        knn = [brute_knn(pts, pts[v], 3)[1:] for v in range(n)]
        dist = lambda a, b: float(np.linalg.norm(pts[a] - pts[b]))  # noqa: E731
        gamma = scale * np.mean([dist(y, x) for y in range(n) for x in knn[y]])
        plan = select_pivots(build_reverse_index(knn, 2))
        best, _ = exhaustive_dps(knn, dist, gamma)
        ratios.append(dps_cost(plan, pts, gamma) / best)
    return ratios


@pytest.mark.parametrize("scale", [
    pytest.param(0.1, marks=pytest.mark.xfail(
        strict=True, reason="greedy ignores gamma; when a naive search is cheaper than a slide "
                            "the optimum makes every node a pivot (ratio up to ~11.5)")),
    1.0, 10.0])
def test_greedy_dps_within_three_times_optimum(scale):
    assert max(_dps_ratios(scale)) <= 3.0


# -- update_graph ------------------------------------------------------------


def test_update_with_no_results_is_noop(small_set):
    g = build_index(small_set, 8, 32)
    before = g.adjacency
    assert update_graph(g, 3, [], 5) == 0
    assert all(np.array_equal(a, b) for a, b in zip(before, g.adjacency))


def test_update_dominant_cross_neighbor():
    vs = VectorSet(np.array([[0.0], [5.0], [6.0], [0.1]], np.float32))
    g = build_index(vs, 4, 8)
    g.set_neighbors(0, [1])
    update_graph(g, 0, [Candidate(3, 0.1)], 1)
    assert g.neighbors(0)[0] == 3


def test_update_matches_reference_reprune():
    rng = np.random.default_rng(7)
    vs = VectorSet(rng.standard_normal((200, 3)).astype(np.float32))
    g = build_index(vs, 6, 24)
    for node in rng.choice(200, 25, replace=False):
        node = int(node)
        old = [int(x) for x in g.neighbors(node)]
        others = [c for c in range(200) if c != node]
        cross = sorted(rng.choice(others, 8, replace=False).tolist(),
                       key=lambda c: (np.linalg.norm(vs[c] - vs[node]), c))
        cres = [Candidate(c, float(np.linalg.norm(vs[c] - vs[node]))) for c in cross]
        update_graph(g, node, cres, 5)
        assert list(g.neighbors(node)) == ref_prune(vs.data, node, old + cross[:5], 6)
    assert validate(g) == []


# -- merges ------------------------------------------------------------------


def test_singleton_merge():
    a = build_index(VectorSet(np.zeros((1, 2)), ids=[0]))
    b = build_index(VectorSet(np.ones((1, 2)), ids=[1]))
    for merge in (naive_merge, rnsm_merge):
        g, _ = merge(a, b, MergeParams(k_plus=1, k=1, k_cross=1, ef_merge=1))
        assert list(g.neighbors(0)) == [1] and list(g.neighbors(1)) == [0]


def test_dim_mismatch():
    a = build_index(VectorSet(np.zeros((2, 2)), ids=[0, 1]))
    b = build_index(VectorSet(np.zeros((2, 3)), ids=[2, 3]))
    with pytest.raises(UsageError):
        naive_merge(a, b)


def test_single_node_source_equals_naive():
    vs = gaussian(300, 4, seed=3)
    a = build_index(vs.subset([0], ids=[0]))
    b = build_index(vs.subset(range(1, 300)), 8, 32)
    g1, r1 = naive_merge(a, b)
    g2, r2 = rnsm_merge(a, b)
    assert g1.edges_equal(g2)
    assert r2.pivots == 1 and r2.followers == 0
    assert r1.total_ndc == r2.total_ndc


@pytest.mark.parametrize("strategy", ["naive", "rnsm"])
def test_merge_ndc_matches_counter(monkeypatch, strategy):
    vs = gaussian(320, 4, seed=5)
    parts, (a, b) = split(vs, M=8, efc=32, backend="python")
    params = MergeParams(k_plus=8, k=3, ef_merge=24, k_cross=6)
    with counted_distances(monkeypatch) as box:
        if strategy == "naive":
            _, rep = naive_merge(a, b, params, backend="python")
        else:
            _, rep = rnsm_merge(a, b, params, seed=1, backend="python")
    assert rep.total_ndc == box["n"]


def test_naive_ndc_is_sum_of_searches(monkeypatch):
    vs = gaussian(320, 4, seed=6)
    _, (a, b) = split(vs, M=8, efc=32, backend="python")
    params = MergeParams(ef_merge=24, k_cross=6)
    _, rep = naive_merge(a, b, params, backend="python")
    assert rep.pivots == a.count and rep.followers == 0
    assert rep.expand_ndc == 0
    assert rep.search_ndc == pytest.approx(rep.gamma * a.count, rel=0.25)


@pytest.fixture(scope="module")
def pair_1k():
    vs = gaussian_mixture(2000, 16, 10, seed=9)
    parts, idx = split(vs, seed=9)
    queries = gaussian_mixture(200, 16, 10, seed=10, centers_seed=9)
    truth = brute_force_knn(vs, queries, 10)
    return vs, parts, idx, queries, truth


def test_merge_quality_against_rebuild_and_naive(pair_1k):
    vs, parts, (a, b), queries, truth = pair_1k
    union = VectorSet.concat(parts)
    rebuilt = build_index(union, 16, 100)
    g_nm, _ = naive_merge(a, b)
    g_rn, rep = rnsm_merge(a, b, seed=1)
    for g in (g_nm, g_rn):
        assert validate(g) == [] and reachable(g).all()
    r_rb = recall(rebuilt, queries, truth, 100)
    assert recall(g_nm, queries, truth, 100) >= r_rb - 0.03
    for ef in (32, 64, 128):
        assert abs(recall(g_rn, queries, truth, ef) - recall(g_nm, queries, truth, ef)) <= 0.03
    assert 0 < rep.sliding_ratio < 1


def test_rnsm_cheaper_than_naive():
    # plain Gaussian partitions with the default ef_merge of 64
    _, (a, b) = split(gaussian(2000, 16, seed=9), seed=9)
    _, nm = naive_merge(a, b)
    _, rn = rnsm_merge(a, b, seed=1)
    assert rn.total_ndc < nm.total_ndc


def test_sliding_ratio_grows_with_k(pair_1k):
    _, _, (a, b), _, _ = pair_1k
    _, r3 = rnsm_merge(a, b, MergeParams(k=3), seed=1)
    _, r20 = rnsm_merge(a, b, MergeParams(k=20), seed=1)
    assert r20.sliding_ratio > r3.sliding_ratio


def test_cross_edges_point_into_target(pair_1k):
    _, _, (a, b), _, _ = pair_1k
    g, _ = rnsm_merge(a, b, seed=1)
    n_src = a.count
    linked = 0
    for v in range(n_src):
        nb = g.neighbors(v)
        cross = nb[nb >= n_src]
        assert (cross < g.count).all()
        linked += len(cross) > 0
    assert linked / n_src > 0.9
    np.testing.assert_array_equal(g.ids[:n_src], a.ids)
    np.testing.assert_array_equal(g.ids[n_src:], b.ids)


def test_larger_source_swaps_roles(pair_1k):
    vs = gaussian(400, 4, seed=2)
    small = build_index(vs.subset(range(100)), 8, 32)
    big = build_index(vs.subset(range(100, 400)), 8, 32)
    g, rep = rnsm_merge(big, small, seed=1)
    assert rep.pivots + rep.followers == 100
    np.testing.assert_array_equal(g.ids[:300], big.ids)
    assert g.entry_point == big.entry_point


def test_determinism_single_worker(pair_1k):
    _, _, (a, b), _, _ = pair_1k
    g1, r1 = rnsm_merge(a, b, seed=4)
    g2, r2 = rnsm_merge(a, b, seed=4)
    assert g1.edges_equal(g2) and r1.total_ndc == r2.total_ndc


def test_parallel_workers_keep_invariants(pair_1k):
    _, _, (a, b), queries, truth = pair_1k
    g1, _ = rnsm_merge(a, b, MergeParams(workers=1), seed=4)
    g4, rep = rnsm_merge(a, b, MergeParams(workers=4), seed=4)
    assert rep.workers == 4
    assert validate(g4) == [] and reachable(g4).all()
    assert abs(recall(g4, queries, truth, 64) - recall(g1, queries, truth, 64)) <= 0.02


def test_params_validation():
    with pytest.raises(UsageError):
        MergeParams(k=30, k_plus=20)
    with pytest.raises(UsageError):
        MergeParams(k_cross=0)
    assert MergeParams().follower_ef == 10
    assert MergeParams(ef_follower=64).follower_ef == 64


def test_samples_record_pivot_distance(pair_1k):
    _, _, (a, b), _, _ = pair_1k
    _, rep = rnsm_merge(a, b, seed=1)
    assert len(rep.samples) == rep.followers
    assert all(d > 0 or math.isclose(d, 0) for d, _ in rep.samples)
    assert all(n > 0 for _, n in rep.samples)
