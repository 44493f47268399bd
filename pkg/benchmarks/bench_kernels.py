"""Compare the compiled and pure-Python kernel backends on build, search and merge.

    python3 benchmarks/bench_kernels.py --n 5000 --dim 16
"""
import argparse
import time

from pgmerge import _backend
from pgmerge.evaluation import bench_search, brute_force_knn
from pgmerge.partition import partition_random
from pgmerge.pgraph import build_index
from pgmerge.rnsm import MergeParams, rnsm_merge
from pgmerge.vecstore import generate


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def run(backend: str, n: int, dim: int, queries: int, ef: int, seed: int) -> dict:
    X = generate(n + queries, dim, seed=seed)
    base, Q = X.subset(range(n)), X.subset(range(n, n + queries)).data
    g, t_build = timed(lambda: build_index(base, seed=seed, backend=backend))
    truth = brute_force_knn(base, Q, 10)
    res = bench_search(g, Q, truth, (ef,), backend=backend, repeats=3)[0]
    parts, _ = partition_random(base, 2, seed)
    a, b = (build_index(p, seed=seed, backend=backend) for p in parts)
    (_, rep), t_merge = timed(lambda: rnsm_merge(a, b, MergeParams(), seed, backend))
    return dict(backend=backend, build_s=t_build, qps=res.qps, recall=res.recall_at_k,
                merge_s=t_merge, merge_ndc=rep.total_ndc)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--queries", type=int, default=500)
    p.add_argument("--ef", type=int, default=64)
    p.add_argument("--seed", type=int, default=42)
    a = p.parse_args()
    rows = [run(b, a.n, a.dim, a.queries, a.ef, a.seed) for b in _backend.available()]
    print(f"n={a.n} dim={a.dim} queries={a.queries} ef={a.ef}")
    print(f"{'backend':<8} {'build s':>9} {'QPS':>10} {'recall':>7} {'merge s':>9} {'merge NDC':>11}")
    for r in rows:
        print(f"{r['backend']:<8} {r['build_s']:9.2f} {r['qps']:10.0f} {r['recall']:7.4f} "
              f"{r['merge_s']:9.2f} {r['merge_ndc']:11d}")
    if len(rows) == 2:
        c, py = rows
        print(f"speedup  build {py['build_s'] / c['build_s']:.1f}x, "
              f"search {c['qps'] / py['qps']:.1f}x, merge {py['merge_s'] / c['merge_s']:.1f}x")


if __name__ == "__main__":
    main()
