import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_all_pairs, exhaustive_mos, prim_mst_cost
from pgmerge.errors import FormatError, UsageError
from pgmerge.evaluation import bench_search, brute_force_knn
from pgmerge.mos import (UNREACHABLE, CostMatrix, MergeOrderGraph, MOSBuilder, build_cost_matrix,
                         cost_matrix_from_centroids, edge_schedule, load_plan, mos_plan, mst_plan,
                         multi_merge, pairwise_plan, path_plan, random_regular_plan, save_plan,
                         separated_search, star_plan)
from pgmerge.partition import partition_random
from pgmerge.pgraph import beam_search, build_index, reachable, validate
from pgmerge.rnsm import rnsm_merge
from pgmerge.vecstore import VectorSet, gaussian


def random_costs(m, seed, kind="centroid"):
    rng = np.random.default_rng(seed)
    if kind == "random":
        return cost_matrix_from_centroids(np.zeros((m, 2)), "random")
    return cost_matrix_from_centroids(rng.standard_normal((m, 3)))


def check_hops(plan):
    H = bfs_all_pairs(plan.m, plan.edges)
    H[np.isinf(H)] = UNREACHABLE
    np.testing.assert_array_equal(plan.hop_matrix, H.astype(np.int64))


# -- cost matrices -----------------------------------------------------------


def test_identical_partitions_cost_zero():
    p = gaussian(50, 4)
    c = build_cost_matrix([p, p])
    assert c[0, 1] == 0.0


def test_random_unit_costs():
    parts = [gaussian(10, 3, seed=s) for s in range(4)]
    c = build_cost_matrix(parts, "random")
    assert c.kind == "random-unit"
    np.testing.assert_array_equal(c.costs, np.ones((4, 4)) - np.eye(4))


def test_unit_square_corners():
    corners = [(0, 0), (1, 0), (0, 1), (1, 1)]
    parts = [VectorSet(np.array([c, c], np.float32) + [[0.1, 0], [-0.1, 0]]) for c in corners]
    C = build_cost_matrix(parts).costs
    assert C[0, 1] == pytest.approx(1) and C[0, 2] == pytest.approx(1)
    assert C[0, 3] == pytest.approx(math.sqrt(2)) and C[1, 2] == pytest.approx(math.sqrt(2))


def test_cost_matrix_validation():
    with pytest.raises(UsageError):
        build_cost_matrix([gaussian(3, 2), VectorSet(np.empty((0, 2)), dim=2)])
    with pytest.raises(UsageError):
        CostMatrix(np.array([[0, 1], [2, 0]]))


# -- plans -------------------------------------------------------------------


def test_two_vertices():
    plan = mos_plan(random_costs(2, 0))
    assert plan.edges == [(0, 1)]


def test_unit_costs_small_instance():
    plan = mos_plan(random_costs(4, 0, "random"), R=3, delta=2)
    assert plan.is_connected() and plan.diameter() <= 2
    assert len(plan.edges) <= 4 * 3 / 2
    assert plan.degree_violations == 0


def test_relay_through_unsaturated_neighbor():
    # vertices 0..5 stand for G1..G6; G1, G2, G3 are saturated at R=3
    costs = random_costs(6, 3)
    b = MOSBuilder(costs, R=3)
    for e in [(0, 1), (0, 2), (0, 5), (1, 2), (1, 3), (2, 3)]:
        b.graph.add_edge(*e)
    assert b.graph.hop[0, 4] > 2
    assert b.connect(0, 4) == (5, 4)
    assert b.graph.has_edge(4, 5) and not b.graph.has_edge(0, 4)
    assert b.graph.hop[0, 4] == 2
    assert b.graph.degree().max() <= 3


def test_relay_prefers_cheapest_neighbor():
    C = np.ones((5, 5)) - np.eye(5)
    C[3, 4] = C[4, 3] = 0.5
    C[2, 4] = C[4, 2] = 0.7
    b = MOSBuilder(CostMatrix(C), R=3)
    for e in [(0, 1), (0, 2), (0, 3)]:
        b.graph.add_edge(*e)
    assert b.connect(0, 4) == (3, 4)


def test_skip_when_both_saturated():
    b = MOSBuilder(random_costs(6, 1, "random"), R=1)
    b.graph.add_edge(0, 1)
    b.graph.add_edge(2, 3)
    assert b.connect(0, 2) is None and b.skipped == [(0, 2)]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=30))
def test_hop_matrix_matches_bfs(edges):
    g = MergeOrderGraph(10, 9)
    for i, j in edges:
        if i != j:
            g.add_edge(i, j)
            check_hops(g)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(2, 6), st.sampled_from([1, 2, 3]), st.integers(0, 10**6))
def test_mos_always_connected(m, R, delta, seed):
    plan = mos_plan(random_costs(m, seed), R, delta)
    assert plan.is_connected()
    check_hops(plan)
    repaired = {v for e in plan.repair_edges for v in e}
    over = set(np.flatnonzero(plan.degree() > R).tolist())
    assert over <= repaired


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_relaxed_bounds_give_mst(m, seed):
    costs = random_costs(m, seed)
    plan = mos_plan(costs, R=m - 1, delta=math.inf)
    mst = prim_mst_cost(costs.costs)
    assert plan.total_cost() >= mst - 1e-9
    assert plan.total_cost() <= 2 * mst + 1e-9
    assert mst_plan(costs).total_cost() == pytest.approx(mst)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10**6))
def test_mos_cheaper_than_pairwise(R, seed):
    m = R + 2 + seed % 6
    costs = random_costs(m, seed)
    plan = mos_plan(costs, R)
    assert plan.total_cost() < pairwise_plan(m, costs).total_cost()


def test_small_exhaustive_ratio():
    for seed in range(8):
        m = 3 + seed % 4
        costs = random_costs(m, seed)
        R = 2 if m <= 5 else 3
        best = exhaustive_mos(costs.costs, R, 2)
        assert mos_plan(costs, R).total_cost() <= 2 * best


def test_pairwise_and_comparators():
    assert len(pairwise_plan(3).edges) == 3
    assert len(pairwise_plan(5).edges) == 10
    assert all(pairwise_plan(m).diameter() == 1 for m in range(2, 8))
    costs = random_costs(7, 2)
    for plan in (path_plan(costs), star_plan(costs), mst_plan(costs)):
        assert len(plan.edges) == 6 and plan.is_connected()
    assert path_plan(costs).degree().max() <= 2
    assert star_plan(costs).diameter() == 2
    rr = random_regular_plan(8, 3, seed=1)
    assert (rr.degree() == 3).all() and rr.is_connected()


def test_plan_round_trip(tmp_path):
    plan = mos_plan(random_costs(9, 4), 3)
    save_plan(plan, tmp_path / "p.json")
    back = load_plan(tmp_path / "p.json")
    assert sorted(back.edges) == sorted(plan.edges) and back.R == 3 and back.delta == 2
    save_plan(back, tmp_path / "q.json")
    assert (tmp_path / "p.json").read_bytes() == (tmp_path / "q.json").read_bytes()
    (tmp_path / "bad.json").write_text('{"m": 2, "edges": [[0, 5]], "R": 1, "delta": 2}')
    with pytest.raises(FormatError):
        load_plan(tmp_path / "bad.json")
    (tmp_path / "bad.json").write_text("not json")
    with pytest.raises(FormatError):
        load_plan(tmp_path / "bad.json")


def test_schedule_spans_before_chords():
    costs = random_costs(6, 5)
    plan = pairwise_plan(6, costs)
    order = edge_schedule(plan, 0)
    inside = {0}
    for e in order[:5]:
        assert (e[0] in inside) != (e[1] in inside)
        inside.update(e)
    assert sorted(order) == sorted(plan.edges)


# -- multi-index merging -----------------------------------------------------


def parts_and_indexes(n, m, dim=8, seed=0):
    vs = gaussian(n, dim, seed=seed)
    parts, _ = partition_random(vs, m, seed)
    return vs, parts, [build_index(p, 12, 64) for p in parts]


def test_single_index_identity():
    _, _, idx = parts_and_indexes(200, 1)
    g, rep = multi_merge(idx, pairwise_plan(1))
    assert g is idx[0] and rep.edges == []


def test_two_indexes_reduce_to_rnsm():
    _, _, (a, b) = parts_and_indexes(600, 2)
    g1, r1 = multi_merge([a, b], pairwise_plan(2), seed=3)
    g2, r2 = rnsm_merge(a, b, seed=3)
    assert g1.edges_equal(g2)
    assert r1.total_ndc == r2.total_ndc


def test_disconnected_plan_rejected():
    _, _, idx = parts_and_indexes(400, 4)
    plan = MergeOrderGraph(4, 3, 2, [(0, 1), (2, 3)])
    with pytest.raises(UsageError):
        multi_merge(idx, plan)
    with pytest.raises(UsageError):
        multi_merge(idx[:3], pairwise_plan(4))


@pytest.fixture(scope="module")
def four_parts():
    vs, parts, idx = parts_and_indexes(2000, 4, dim=12, seed=8)
    queries = gaussian(200, 12, seed=99)
    truth = brute_force_knn(vs, queries, 10)
    return parts, idx, queries, truth


def test_mos_merge_against_pairwise(four_parts):
    parts, idx, queries, truth = four_parts
    costs = build_cost_matrix(parts, "random")
    plan = mos_plan(costs, R=3)
    g_mos, r_mos = multi_merge(idx, plan, seed=1)
    g_pw, r_pw = multi_merge(idx, pairwise_plan(4, costs), strategy="naive")
    for g in (g_mos, g_pw):
        assert validate(g) == [] and reachable(g).all()
    assert r_mos.total_ndc < r_pw.total_ndc
    rm = bench_search(g_mos, queries, truth, [64], 10)[0].recall_at_k
    rp = bench_search(g_pw, queries, truth, [64], 10)[0].recall_at_k
    assert rm >= rp - 0.04
    biggest = max(range(4), key=lambda i: (idx[i].count, -i))
    assert g_mos.ids[g_mos.entry_point] == idx[biggest].ids[idx[biggest].entry_point]


def test_edge_order_does_not_matter_much(four_parts):
    parts, idx, queries, truth = four_parts
    plan = pairwise_plan(4, build_cost_matrix(parts))
    g1, _ = multi_merge(idx, plan, seed=1)
    reverse = list(reversed(edge_schedule(plan, 0)))
    g2, _ = multi_merge(idx, plan, seed=1, schedule=reverse)
    r1 = bench_search(g1, queries, truth, [64], 10)[0].recall_at_k
    r2 = bench_search(g2, queries, truth, [64], 10)[0].recall_at_k
    assert abs(r1 - r2) < 0.02
    with pytest.raises(UsageError):
        multi_merge(idx, plan, schedule=reverse[:-1])


def test_separated_search(four_parts):
    parts, idx, queries, _ = four_parts
    q = queries[0]
    res, stats = separated_search(idx[:1], q, 32, 10)
    ref, rstats = beam_search(idx[0], q, 32, 10)
    assert [c.id for c in res] == [int(idx[0].ids[c.id]) for c in ref]
    assert stats.ndc == rstats.ndc
    res, stats = separated_search(idx, q, 32, 10)
    assert stats.ndc == sum(beam_search(g, q, 32, 10)[1].ndc for g in idx)
    assert [c.dist for c in res] == sorted(c.dist for c in res)
