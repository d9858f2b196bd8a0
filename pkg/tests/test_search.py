from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgsearch.core import BudgetLedger, InvalidInputError, QueryRecord
from rgsearch.graph_index import GraphIndex, build_knn
from rgsearch.reranker import OracleBackend, StaticScoreBackend
from rgsearch.search import (
    RgsParams,
    SearchTrace,
    ann_top,
    default_ls,
    random_scan_search,
    read_traces,
    retrieve_and_rerank,
    rgs_search,
    sliding_window_pass,
    slidegar_search,
    start_points,
    write_traces,
)

from .conftest import random_corpus, random_qrels, random_query


def oracle_sorted(backend, q, docs):
    s = backend.scores(q, docs)
    return [d for _, d in sorted(zip(s, docs), key=lambda t: (-t[0], t[1]))]


def simulate_pass(items, window, key):
    """Backward half-overlap pass, written out directly."""
    items = list(items)
    i = len(items)
    while i > 0:
        lo = max(0, i - window)
        items[lo:i] = sorted(items[lo:i], key=key)
        if lo == 0:
            break
        i -= window // 2
    return items


@pytest.fixture(scope="module")
def setup40():
    corpus = random_corpus(40, 8, seed=3, texts=True)
    q = random_query(8, 11, "q")
    qrels = random_qrels(corpus, "q", 8, 12)
    return corpus, q, qrels, OracleBackend(corpus, qrels, [q])


def test_default_ls():
    assert [default_ls(k) for k in (100, 300, 500)] == [20, 30, 50]
    assert default_ls(200) == 25
    assert default_ls(400) == 40
    assert default_ls(50) == 10  # k/5 but never below the window
    assert default_ls(80, window=4) == 16
    assert default_ls(1000) == 100


def test_rgs_params_validation():
    with pytest.raises(InvalidInputError, match="budget must be >= seeds"):
        RgsParams(0)
    with pytest.raises(InvalidInputError):
        RgsParams(100, ls=4, window=10)
    with pytest.raises(InvalidInputError):
        RgsParams(100, start_strategy="psychic")
    assert RgsParams(100).seeds == 20


def test_single_window_pass_sorts(setup40):
    corpus, q, _, backend = setup40
    items = corpus.ids[:10]
    out, exhausted, ran = sliding_window_pass(items, 10, 10, backend, BudgetLedger(10), q)
    assert out == oracle_sorted(backend, q, items)
    assert not exhausted and ran == 1


def test_pass_bubbles_best_to_front(setup40):
    corpus, q, _, backend = setup40
    rng = np.random.default_rng(5)
    for _ in range(10):
        items = list(rng.choice(corpus.ids, size=30, replace=False))
        out, _, _ = sliding_window_pass(items, 30, 10, backend, BudgetLedger(40), q)
        scores = dict(zip(items, backend.scores(q, items)))
        assert out[0] == max(items, key=lambda d: (scores[d], [-ord(c) for c in d]))
        assert out == simulate_pass(items, 10, lambda d: (-scores[d], d))


def test_pass_with_no_budget_is_noop(setup40):
    corpus, q, _, backend = setup40
    led = BudgetLedger(5)
    led.charge(corpus.ids[30:35])
    items = corpus.ids[:10]
    out, exhausted, ran = sliding_window_pass(items, 10, 10, backend, led, q)
    assert out == items and exhausted and ran == 0
    assert led.calls == 1


def test_pass_truncates_last_window(setup40):
    corpus, q, _, backend = setup40
    led = BudgetLedger(7)
    trace = SearchTrace("q", "t", led)
    out, exhausted, _ = sliding_window_pass(corpus.ids[:20], 20, 10, backend, led, q, trace)
    assert len(led.scanned) == 7
    assert trace.windows[0].truncated_from == 10 and len(trace.windows[0].docs_in) == 7
    assert exhausted


def test_start_points(small, hard):
    corpus, queries, _, index = small
    doc = corpus.ids[123]
    q = QueryRecord("x", corpus.vector(doc))
    assert start_points(q, index, corpus, "exact", 1) == [doc]
    a = start_points(queries[0], index, corpus, "index_default", 5)
    b = start_points(queries[1], index, corpus, "index_default", 5)
    assert a == b == [index.default_start_id]
    with pytest.raises(InvalidInputError):
        start_points(queries[0], index, corpus, "noisy", 10, noisy_rank=595)

    hcorpus, hqueries, _, hindex = hard
    q = hqueries[3]
    got = start_points(q, hindex, hcorpus, "noisy", 20, noisy_rank=1000)
    sims = hcorpus.vectors.astype(np.float64) @ q.embedding.astype(np.float64)
    ranked = sorted(range(len(hcorpus)), key=lambda i: (-sims[i], hcorpus.ids[i]))
    assert got == [hcorpus.ids[i] for i in ranked[999:1019]]


def test_rgs_budget_equal_to_seeds(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    q = queries[0]
    res, trace = rgs_search(q, corpus, index, backend, RgsParams(8, seeds=8))
    seeds = start_points(q, index, corpus, "exact", 8)
    assert res.entries == oracle_sorted(backend, q, seeds)
    # stage 2 never gets a window through the gate
    assert trace.ledger.calls == 1
    assert len(trace.ledger.scanned) == 8


@pytest.mark.parametrize("k", [10, 37, 100, 250])
def test_rgs_invariants(small, k):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    for q in queries:
        res, trace = rgs_search(q, corpus, index, backend, RgsParams(k))
        assert len(trace.ledger.scanned) <= k
        assert set(res.entries) <= trace.seen
        assert trace.seen == trace.ledger.scanned
        assert len(res.entries) == min(10, len(trace.seen))


def test_rgs_partial_pass_mode(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    full = rgs_search(queries[0], corpus, index, backend, RgsParams(100))[1]
    part = rgs_search(queries[0], corpus, index, backend, RgsParams(100, full_pass=False))[1]
    assert len(part.ledger.scanned) <= 100
    assert part.ledger.doc_views < full.ledger.doc_views


def test_rgs_top1_positive_when_any_positive_scanned(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    for q in queries:
        for k in (20, 60, 150):
            # Ls large enough that A is never cut
            res, trace = rgs_search(q, corpus, index, backend, RgsParams(k, ls=1000))
            if any(qrels.grade(q.qid, d) > 0 for d in trace.seen):
                assert qrels.grade(q.qid, res.entries[0]) > 0


def test_rgs_seen_coverage_monotone(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    for q in queries:
        pos = set(qrels.positives(q.qid))
        counts = [len(pos & rgs_search(q, corpus, index, backend, RgsParams(k))[1].seen) for k in (100, 300, 500)]
        assert counts == sorted(counts)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([20, 50, 120]))
def test_rgs_index_default_ignores_query_embedding(small, seed, k):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    base = queries[seed % len(queries)]
    other = QueryRecord(base.qid, np.random.default_rng(seed).standard_normal(corpus.dim), base.text)
    p = RgsParams(k, start_strategy="index_default")
    a = rgs_search(base, corpus, index, backend, p)
    b = rgs_search(other, corpus, index, backend, p)
    assert a[0] == b[0]
    assert a[1].to_dict() == b[1].to_dict()


def test_rgs_deterministic(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    a = rgs_search(queries[2], corpus, index, backend, RgsParams(80))
    b = rgs_search(queries[2], corpus, index, backend, RgsParams(80))
    assert a[0] == b[0] and a[1].to_json() == b[1].to_json()


def _complete_graph(corpus):
    n = len(corpus)
    return GraphIndex(list(corpus.ids), [[j for j in range(n) if j != i] for i in range(n)], n - 1, 0, "knn")


def test_rr_full_sort_small(setup40):
    corpus, q, qrels, backend = setup40
    scores = dict(zip(corpus.ids, backend.scores(q, corpus.ids)))
    best = oracle_sorted(backend, q, corpus.ids)
    # n <= w: one window sorts everything
    small = type(corpus)(corpus.ids[:10], corpus.vectors[:10], corpus.texts[:10])
    res, _ = retrieve_and_rerank(q, small, _complete_graph(small), backend, 10)
    assert set(res.entries) == set(oracle_sorted(backend, q, small.ids))
    # larger n: the half-overlap pass guarantees the best w/2 reach the front, in order
    res, trace = retrieve_and_rerank(q, corpus, _complete_graph(corpus), backend, 40)
    assert res.entries[:5] == best[:5]
    shortlist = trace.steps[0]["shortlist"]
    assert res.entries == simulate_pass(shortlist, 10, lambda d: (-scores[d], d))[:10]
    assert len(trace.ledger.scanned) == 40


def test_rr_static_backend_is_ann_top(small):
    corpus, queries, _, index = small
    backend = StaticScoreBackend(corpus)
    for q in queries:
        res, trace = retrieve_and_rerank(q, corpus, index, backend, 50)
        assert res.entries == ann_top(q, index, corpus, 10, beam=50)
        assert len(trace.ledger.scanned) == 50


def test_rr_errors(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    with pytest.raises(InvalidInputError):
        retrieve_and_rerank(queries[0], corpus, index, backend, len(corpus) + 1)


def test_slidegar_without_frontier_matches_rr(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    empty = GraphIndex(list(corpus.ids), [[] for _ in corpus.ids], 1, 0, "knn")
    for q in queries:
        a, _ = slidegar_search(q, corpus, empty, backend, 100, window=20, shortlist_index=index)
        b, _ = retrieve_and_rerank(q, corpus, index, backend, 100, window=20)
        assert a.entries == b.entries


def test_slidegar_window_count_and_determinism(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    knn = build_knn(corpus, 8)
    for q in queries:
        res, trace = slidegar_search(q, corpus, knn, backend, 100, window=20, shortlist_index=index)
        charged = [w for w in trace.windows if w.new_docs]
        assert len(charged) <= 5
        assert len(trace.ledger.scanned) <= 100
        again, _ = slidegar_search(q, corpus, knn, backend, 100, window=20, shortlist_index=index)
        assert again == res


def test_slidegar_reaches_frontier(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    _, trace = slidegar_search(queries[0], corpus, build_knn(corpus, 8), backend, 100, shortlist_index=None)
    sources = [s["source"] for s in trace.steps if s.get("stage") == 2]
    assert "frontier" in sources and "shortlist" in sources


def test_random_scan(small):
    corpus, queries, qrels, _ = small
    backend = OracleBackend(corpus, qrels, queries)
    a, ta = random_scan_search(queries[0], corpus, backend, 60, seed=1)
    b, _ = random_scan_search(queries[0], corpus, backend, 60, seed=1)
    c, tc = random_scan_search(queries[0], corpus, backend, 60, seed=2)
    assert a == b
    assert len(ta.ledger.scanned) == 60
    assert ta.seen != tc.seen


def test_trace_serialization(small):
    corpus, queries, qrels, index = small
    backend = OracleBackend(corpus, qrels, queries)
    traces = [rgs_search(q, corpus, index, backend, RgsParams(40))[1] for q in queries[:3]]
    buf = io.StringIO()
    write_traces(traces, buf)
    back = read_traces(buf.getvalue().splitlines())
    assert [t["qid"] for t in back] == [q.qid for q in queries[:3]]
    assert back[0]["final"] == traces[0].final.entries
    assert set(back[0]["scanned"]) == traces[0].seen
