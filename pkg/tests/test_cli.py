from __future__ import annotations

import csv
import struct

import numpy as np
import pytest

from rgsearch.cli import main
from rgsearch.core import load_corpus, load_qrels, load_queries
from rgsearch.graph_index import load_index
from rgsearch.search import ann_top

SMALL = ["--n", "800", "--dim", "16", "--clusters", "8", "--queries", "6", "--relevant-per-query", "5",
         "--planted-rank-offset", "40", "--seed", "3"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d), *SMALL]) == 0
    assert main(["build", "--corpus", str(d / "corpus.jsonl"), "--out", str(d / "g.idx"), "--R", "16", "--L-build", "32"]) == 0
    return d


def _common(d):
    return ["--corpus", str(d / "corpus.jsonl"), "--queries", str(d / "queries.jsonl"), "--qrels", str(d / "qrels.txt")]


def test_gen_round_trip_and_determinism(tmp_path, workspace):
    assert main(["gen", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("corpus.jsonl", "queries.jsonl", "qrels.txt"):
        assert (tmp_path / name).read_bytes() == (workspace / name).read_bytes()
    corpus = load_corpus(tmp_path / "corpus.jsonl")
    assert len(corpus) == 800 and corpus.dim == 16
    assert len(load_queries(tmp_path / "queries.jsonl")) == 6
    assert len(load_qrels(tmp_path / "qrels.txt", corpus)) == 30


def test_gen_binary_format(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--format", "bin", *SMALL]) == 0
    raw = (tmp_path / "corpus.bin").read_bytes()
    assert struct.unpack_from("<IIQ", raw, 0)[1:] == (16, 800)


def test_gen_infeasible_offset_exits_2(tmp_path, capsys):
    code = main(["gen", "--out", str(tmp_path), "--n", "200", "--dim", "8", "--clusters", "2", "--queries", "1",
                 "--relevant-per-query", "5", "--planted-rank-offset", "5000"])
    assert code == 2
    assert "infeasible" in capsys.readouterr().err


def test_build_knn_degree(tmp_path, workspace, capsys):
    out = tmp_path / "k.idx"
    assert main(["build", "--corpus", str(workspace / "corpus.jsonl"), "--graph", "knn", "--degree", "5", "--out", str(out)]) == 0
    stats = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    assert stats["kind"] == "knn" and stats["max_degree"] == "5"
    idx = load_index(out)
    assert set(idx.degrees().tolist()) == {5}


def test_build_diskann_stats_match_file(workspace, capsys):
    assert main(["build", "--corpus", str(workspace / "corpus.jsonl"), "--out", str(workspace / "g2.idx"),
                 "--R", "16", "--L-build", "32"]) == 0
    stats = dict(line.split("\t") for line in capsys.readouterr().out.splitlines())
    # same flags, same seed: byte-identical index
    raw = (workspace / "g2.idx").read_bytes()
    assert raw == (workspace / "g.idx").read_bytes()
    idx = load_index(workspace / "g2.idx")
    degrees = [len(idx.out_neighbors(d)) for d in idx.ids]
    assert int(stats["vertices"]) == 800
    assert int(stats["max_degree"]) == max(degrees) <= 16
    assert float(stats["mean_degree"]) == pytest.approx(np.mean(degrees), abs=1e-3)


def test_build_missing_corpus_exits_2(tmp_path, capsys):
    out = tmp_path / "x.idx"
    assert main(["build", "--corpus", str(tmp_path / "nope.jsonl"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "nope.jsonl" in capsys.readouterr().err


def test_search_rr_static_equals_ann_top(workspace, tmp_path, capsys):
    args = ["search", *_common(workspace), "--index", str(workspace / "g.idx"), "--method", "rr",
            "--backend", "static_score", "--budget", "50", "--qid", "q0", "--trace", str(tmp_path / "t.jsonl")]
    assert main(args) == 0
    first = capsys.readouterr().out
    got = [line.split("\t")[1] for line in first.splitlines()]
    corpus = load_corpus(workspace / "corpus.jsonl", normalize=True)
    query = next(q for q in load_queries(workspace / "queries.jsonl") if q.qid == "q0")
    index = load_index(workspace / "g.idx", corpus)
    assert got == ann_top(query, index, corpus, 50)[:10]
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert (tmp_path / "t.jsonl").read_text().count("\n") == 1


def test_search_budget_zero_exits_2(workspace, tmp_path):
    assert main(["search", *_common(workspace), "--index", str(workspace / "g.idx"), "--budget", "0",
                 "--qid", "q0", "--trace", str(tmp_path / "t.jsonl")]) == 2


def test_search_unknown_query_exits_2(workspace, tmp_path):
    assert main(["search", *_common(workspace), "--index", str(workspace / "g.idx"), "--qid", "nobody",
                 "--trace", str(tmp_path / "t.jsonl")]) == 2


def test_eval_outputs_and_separation(workspace, tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["eval", *_common(workspace), "--index", str(workspace / "g.idx"), "--budgets", "30",
                 "--methods", "rr,rgs", "--out", str(out), "--jobs", "1"]) == 0
    table = capsys.readouterr().out.splitlines()
    assert table[0].split("\t")[:3] == ["method", "budget", "ndcg10"]
    means = {line.split("\t")[0]: float(line.split("\t")[2]) for line in table[1:]}
    # offset 40 puts every positive beyond a budget-30 shortlist
    assert means["rr"] == 0.0
    assert means["rgs"] > 0.3
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 6 + 2
    assert (out / "ndcg_vs_budget.svg").exists() and (out / "error_breakdown.svg").exists()


def test_eval_query_perturbation_index_default(workspace, tmp_path):
    base = ["eval", *_common(workspace), "--index", str(workspace / "g.idx"), "--budgets", "30", "--methods", "rgs",
            "--start", "index_default", "--no-plots", "--jobs", "1"]
    assert main([*base, "--out", str(tmp_path / "a")]) == 0
    assert main([*base, "--out", str(tmp_path / "b"), "--perturb", "query:1.0"]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()


def test_eval_bad_perturb_names_field(workspace, tmp_path, capsys):
    code = main(["eval", *_common(workspace), "--perturb", "query:2.0", "--out", str(tmp_path)])
    assert code == 2
    assert "perturb" in capsys.readouterr().err


def test_config_file_overridden_by_flag(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"budgets = 20\nmethods = rr\nno-plots = true\nindex = {workspace / 'g.idx'}\njobs = 1\n")
    assert main(["eval", "--config", str(cfg), *_common(workspace), "--budgets", "25", "--out", str(tmp_path / "o")]) == 0
    lines = capsys.readouterr().out.splitlines()[1:]
    assert [line.split("\t")[:2] for line in lines] == [["rr", "25"]]
    assert not (tmp_path / "o" / "ndcg_vs_budget.svg").exists()
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    assert main(["eval", "--config", str(bad), *_common(workspace)]) == 2


def test_eval_backend_failures_exit_4(workspace, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RGS_API_KEY", "test-key")
    code = main(["eval", *_common(workspace), "--index", str(workspace / "g.idx"), "--budgets", "20",
                 "--methods", "rr", "--backend", "http_llm", "--endpoint", "http://127.0.0.1:9/v1",
                 "--model", "m", "--max-retries", "0", "--timeout", "2", "--max-failed", "0",
                 "--no-plots", "--jobs", "1", "--out", str(tmp_path / "o")])
    assert code == 4
    assert "failed" in capsys.readouterr().err
