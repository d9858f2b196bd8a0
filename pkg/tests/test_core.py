from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgsearch.core import (
    BudgetExceededError,
    BudgetLedger,
    Corpus,
    InvalidInputError,
    LoadError,
    QueryRecord,
    RankedList,
    RelevanceJudgments,
    atomic_write,
    load_corpus,
    load_qrels,
    load_queries,
    save_corpus,
    save_qrels,
    save_queries,
    similarity,
)
from rgsearch.eval.synthetic import gen_synthetic


def naive_dot(a, b):
    total = 0.0
    for x, y in zip(a, b):
        total += float(x) * float(y)
    return total


def test_similarity_hand_values():
    assert similarity([1, 0], [0, 1]) == 0.0
    assert similarity([1, 2], [3, 4]) == 11.0


def test_similarity_matches_summation_loop():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.standard_normal(64).astype(np.float32)
        b = rng.standard_normal(64).astype(np.float32)
        assert abs(similarity(a, b) - naive_dot(a, b)) <= 1e-6


def test_similarity_dim_mismatch():
    with pytest.raises(InvalidInputError):
        similarity([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(-100, 100), min_size=1, max_size=12),
    st.floats(-10, 10),
    st.integers(0, 2**31 - 1),
)
def test_similarity_symmetric_and_bilinear(values, scale, seed):
    a = np.array(values)
    b = np.random.default_rng(seed).standard_normal(len(a))
    assert similarity(a, b) == similarity(b, a)
    assert similarity(scale * a, b) == pytest.approx(scale * similarity(a, b), rel=1e-9, abs=1e-9)


def test_corpus_rejects_duplicates_and_nan():
    with pytest.raises(InvalidInputError):
        Corpus(["a", "a"], np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        Corpus(["a"], np.array([[np.nan, 0.0]]))


def test_load_jsonl_fixture(data_dir):
    corpus = load_corpus(data_dir / "tiny.jsonl")
    assert len(corpus) == 3 and corpus.dim == 4
    assert corpus.ids == ["a", "b", "c"]
    assert corpus.text("a") == "apples grow on trees"
    assert corpus.text("c") is None
    normed = load_corpus(data_dir / "tiny.jsonl", normalize=True)
    assert np.allclose(np.linalg.norm(normed.vectors, axis=1), 1.0)


def test_load_jsonl_bad_dim_cites_row(data_dir):
    with pytest.raises(LoadError, match=r"line 3 \(row 2\)"):
        load_corpus(data_dir / "bad_dim.jsonl")


def test_load_jsonl_malformed_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text('{"id": "a", "vector": [1, 2]}\nnot json\n')
    with pytest.raises(LoadError, match="line 2"):
        load_corpus(p)


def test_binary_round_trip_1000_docs(tmp_path):
    corpus, _, _ = gen_synthetic(1000, 64, 5, 2, 3, 0.6, 0, 11)
    path = tmp_path / "corpus.bin"
    save_corpus(corpus, path, format="bin")
    raw = path.read_bytes()
    magic, dim, count = struct.unpack_from("<IIQ", raw, 0)
    assert (magic, dim, count) == (0x52475331, 64, 1000)
    back = load_corpus(path)
    assert back.ids == corpus.ids
    assert np.array_equal(back.vectors, corpus.vectors)


def test_binary_truncated(tmp_path):
    corpus, _, _ = gen_synthetic(50, 8, 2, 1, 2, 0.6, 0, 1)
    path = tmp_path / "c.bin"
    save_corpus(corpus, path, format="bin")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(LoadError, match="truncated at record 49"):
        load_corpus(path)


def test_queries_round_trip(tmp_path):
    qs = [QueryRecord("q1", [1.0, 0.0], "first"), QueryRecord("q2", [0.0, 2.0], None)]
    save_queries(qs, tmp_path / "q.jsonl")
    back = load_queries(tmp_path / "q.jsonl")
    assert [q.qid for q in back] == ["q1", "q2"]
    assert back[0].text == "first" and back[1].text is None
    assert np.array_equal(back[1].embedding, np.array([0.0, 2.0], dtype=np.float32))


def test_qrels_all_present(data_dir):
    corpus = load_corpus(data_dir / "tiny.jsonl")
    qrels = load_qrels(data_dir / "qrels_all_present.txt", corpus)
    assert len(qrels) == 5 and qrels.dropped == 0
    assert qrels.grade("q1", "c") == 2
    # explicit zero behaves like an absent pair
    assert qrels.grade("q1", "b") == 0
    assert qrels.positives("q1") == ["a", "c"]


def test_qrels_unknown_doc_dropped(data_dir, caplog):
    corpus = load_corpus(data_dir / "tiny.jsonl")
    qrels = load_qrels(data_dir / "qrels_unknown.txt", corpus)
    assert qrels.dropped == 1
    assert len(qrels) == 2
    assert "dropped 1" in caplog.text


def test_qrels_bad_line(tmp_path):
    p = tmp_path / "q.txt"
    p.write_text("q1 0 a 1\nq1 0 b high\n")
    with pytest.raises(LoadError, match="line 2"):
        load_qrels(p)


def test_qrels_round_trip(tmp_path):
    qrels = RelevanceJudgments({("q", "a"): 2, ("q", "b"): 0, ("r", "a"): 1})
    save_qrels(qrels, tmp_path / "q.txt")
    assert load_qrels(tmp_path / "q.txt").grades == qrels.grades


def test_ranked_list_rejects_duplicates():
    with pytest.raises(InvalidInputError):
        RankedList("q", ["a", "b", "a"])


def test_ledger_counts_first_appearance_only():
    led = BudgetLedger(5)
    assert led.charge(["a", "b", "c"]) == ["a", "b", "c"]
    assert led.charge(["b", "c", "d"]) == ["d"]
    assert len(led.scanned) == 4
    assert led.doc_views == 6 and led.calls == 2


def test_ledger_rejects_atomically():
    led = BudgetLedger(3)
    led.charge(["a", "b"])
    before = (set(led.scanned), led.doc_views, led.calls)
    with pytest.raises(BudgetExceededError):
        led.charge(["c", "d"])
    assert (led.scanned, led.doc_views, led.calls) == before


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 30),
    st.lists(st.lists(st.integers(0, 40), min_size=1, max_size=10), max_size=25),
)
def test_ledger_never_exceeds_budget(budget, windows):
    led = BudgetLedger(budget)
    for w in windows:
        docs = [f"d{x}" for x in w]
        try:
            led.charge(docs)
        except BudgetExceededError:
            pass
        assert len(led.scanned) <= budget
        assert led.doc_views >= len(led.scanned)
        assert led.calls >= 1 or led.doc_views == 0


def test_atomic_write_leaves_nothing_on_error(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_write(target, "w") as fh:
            fh.write("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
