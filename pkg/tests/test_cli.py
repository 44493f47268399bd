import json
import subprocess
import sys
import time

import numpy as np

from pgmerge.cli import run
from pgmerge.evaluation import read_rows
from pgmerge.mos import load_plan
from pgmerge.pgraph import load_index, reachable, validate
from pgmerge.vecstore import load_groundtruth, load_ivecs


def ok(*argv):
    assert run([str(a) for a in argv]) == 0, argv


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "merge-multi" in capsys.readouterr().out
    out = subprocess.run([sys.executable, "-m", "pgmerge", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "usage" in out.stdout


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run(["build"]) == 1
    assert run(["build", "--input", "x", "--out", "y", "--bogus"]) == 1
    assert run([]) == 1
    assert "pgmerge" in capsys.readouterr().err


def test_conflicting_flags(tmp_path):
    ok("generate", "--n", 50, "--dim", 4, "--out", tmp_path / "x.fvecs")
    man = tmp_path / "m.json"
    man.write_text(json.dumps({"partitions": [{"file": "x.fvecs", "offset": 0}]}))
    assert run(["build", "--input", str(tmp_path / "x.fvecs"), "--out", str(tmp_path / "g.idx"),
                "--manifest", str(man), "--id-offset", "5"]) == 1
    assert not (tmp_path / "g.idx").exists()


def test_format_errors_exit_two(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"NOPE" + b"\0" * 40)
    q = tmp_path / "q.fvecs"
    ok("generate", "--n", 5, "--dim", 4, "--out", q)
    assert run(["search", "--index", str(bad), "--queries", str(q), "--out",
                str(tmp_path / "r.ivecs")]) == 2
    assert not (tmp_path / "r.ivecs").exists()
    assert run(["build", "--input", str(tmp_path / "missing.fvecs"), "--out",
                str(tmp_path / "g.idx")]) == 2


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PGMERGE_SEED", "7")
    ok("generate", "--n", 20, "--dim", 3, "--out", tmp_path / "a.fvecs")
    ok("generate", "--n", 20, "--dim", 3, "--seed", 7, "--out", tmp_path / "b.fvecs")
    assert (tmp_path / "a.fvecs").read_bytes() == (tmp_path / "b.fvecs").read_bytes()
    monkeypatch.setenv("PGMERGE_SEED", "x")
    assert run(["generate", "--n", 2, "--dim", 2, "--out", str(tmp_path / "c.fvecs")]) == 1


def pipeline(d, n, dim=16, m=4, workers=1):
    d.mkdir(parents=True, exist_ok=True)
    ok("generate", "--n", n, "--dim", dim, "--clusters", 8, "--queries", 200,
       "--out", d / "base.fvecs")
    ok("partition", "--input", d / "base.fvecs", "--m", m, "--kind", "kmeans",
       "--out-dir", d / "parts")
    idx = []
    for i in range(m):
        part = d / "parts" / f"part_{i:03d}.fvecs"
        ok("build", "--input", part, "--manifest", d / "parts" / "manifest.json",
           "--out", d / f"p{i}.idx")
        idx.append(str(d / f"p{i}.idx"))
    ok("plan", "--centroids", d / "parts" / "centroids.fvecs", "--R", 2, "--out", d / "plan.json")
    ok("merge-multi", "--indexes", ",".join(idx), "--plan", d / "plan.json", "--out",
       d / "all.idx", "--report", d / "multi.csv", "--workers", workers)
    ok("merge", "--source", idx[0], "--target", idx[1], "--out", d / "pair.idx",
       "--report", d / "pair.csv", "--workers", workers)
    ok("gt", "--base", d / "base.fvecs", "--queries", d / "base.queries.fvecs", "--k", 10,
       "--out", d / "gt.ivecs")
    ok("bench", "--index", d / "all.idx", "--queries", d / "base.queries.fvecs", "--gt",
       d / "gt.ivecs", "--efs", "32,64,128", "--manifest", d / "parts" / "manifest.json",
       "--out", d / "bench.csv")
    ok("search", "--index", d / "all.idx", "--queries", d / "base.queries.fvecs", "--ef", 64,
       "--manifest", d / "parts" / "manifest.json", "--out", d / "res.ivecs",
       "--stats", d / "stats.json")
    return d


def test_full_pipeline(tmp_path):
    t0 = time.perf_counter()
    d = pipeline(tmp_path / "run", 20_000)
    assert time.perf_counter() - t0 < 300
    g = load_index(d / "all.idx")
    assert g.count == 20_000 and validate(g) == [] and reachable(g).all()
    assert sorted(g.ids.tolist()) == list(range(20_000))
    plan = load_plan(d / "plan.json")
    assert plan.m == 4 and plan.is_connected()
    rows = read_rows(d / "bench.csv")
    assert [int(r["ef"]) for r in rows] == [32, 64, 128]
    assert float(rows[-1]["recall_at_k"]) > 0.9
    report = (d / "pair.csv").read_text().splitlines()
    assert report[0] == "# pgmerge-report v1" and report[1].startswith("# config: ")
    assert report[3] == "phase,pivots,followers,sliding_ratio,total_ndc,wall_ms"
    samples = (d / "pair.samples.csv").read_text().splitlines()
    assert samples[1] == "pivot_dist,slide_ndc" and len(samples) > 100
    res = load_ivecs(d / "res.ivecs")
    gt = load_groundtruth(d / "gt.ivecs").neighbors
    assert np.mean([len(set(a) & set(b)) for a, b in zip(res, gt)]) / 10 > 0.85
    assert json.loads((d / "stats.json").read_text())["mean_ndc"] > 0


def test_outputs_are_deterministic(tmp_path):
    a = pipeline(tmp_path / "a", 3000)
    b = pipeline(tmp_path / "b", 3000)
    for name in ("base.fvecs", "parts/part_000.fvecs", "p0.idx", "plan.json", "all.idx",
                 "pair.idx", "gt.ivecs"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_compare_modes(tmp_path):
    d = tmp_path
    ok("generate", "--n", 2000, "--dim", 8, "--clusters", 4, "--queries", 50,
       "--out", d / "b.fvecs")
    ok("partition", "--input", d / "b.fvecs", "--m", 4, "--kind", "kmeans", "--out-dir", d / "p")
    ok("gt", "--base", d / "b.fvecs", "--queries", d / "b.queries.fvecs", "--k", 10,
       "--out", d / "gt.ivecs")
    parts = ",".join(str(d / "p" / f"part_{i:03d}.fvecs") for i in range(4))
    assert run(["compare", "--parts", parts, "--out", str(d / "x.csv")]) == 1
    man = ["--manifest", d / "p" / "manifest.json"]
    ok("compare", "--mode", "strategies", "--parts", parts, "--queries", d / "b.queries.fvecs",
       "--gt", d / "gt.ivecs", *man, "--efs", "32,64", "--strategies", "naive,rnsm,rebuild",
       "--max-degree", 12, "--ef-construction", 64, "--out", d / "s.csv")
    rows = read_rows(d / "s.csv")
    rebuilt = [float(r["recall_at_k"]) for r in rows if r["strategy"] == "rebuild"]
    assert max(rebuilt) > 0.9
    ok("compare", "--mode", "orders", "--parts", parts, "--queries", d / "b.queries.fvecs",
       "--gt", d / "gt.ivecs", *man, "--efs", "32,64", "--R", 2, "--max-degree", 12,
       "--ef-construction", 64, "--out", d / "o.csv")
    ok("compare", "--mode", "pivots", "--parts", parts, "--max-degree", 12,
       "--ef-construction", 64, "--out", d / "v.csv")
    assert {r["variant"] for r in read_rows(d / "v.csv")} == {"nsm-iterative", "rnsm",
                                                              "rnsm-random-pivots"}
