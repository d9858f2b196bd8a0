from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from rgsearch.core import Corpus, QueryRecord, RelevanceJudgments
from rgsearch.eval.synthetic import HARD_FIXTURE, gen_from_params, gen_synthetic
from rgsearch.graph_index import BuildParams, build_diskann

DATA = Path(__file__).parent / "data"

# filled by test_acceptance, printed at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def hard():
    """The shipped hard fixture with its DiskANN index, built once."""
    corpus, queries, qrels = gen_from_params(HARD_FIXTURE)
    index = build_diskann(corpus, BuildParams())
    return corpus, queries, qrels, index


@pytest.fixture(scope="session")
def small():
    """Clustered 600-doc corpus with 8 queries; cheap enough for many runs."""
    corpus, queries, qrels = gen_synthetic(600, 16, 6, 8, 5, 0.6, 30, 1, bridge_fraction=0.4)
    index = build_diskann(corpus, BuildParams(R=16, L_build=32))
    return corpus, queries, qrels, index


def random_corpus(n: int, dim: int, seed: int = 0, texts: bool = False) -> Corpus:
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((n, dim)).astype(np.float32)
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    ids = [f"doc{i:05d}" for i in range(n)]
    return Corpus(ids, vecs, [f"text of {d}" for d in ids] if texts else None)


def random_query(dim: int, seed: int, qid: str = "q") -> QueryRecord:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return QueryRecord(qid, (v / np.linalg.norm(v)).astype(np.float32), f"query {qid}")


def random_qrels(corpus: Corpus, qid: str, count: int, seed: int, max_grade: int = 3) -> RelevanceJudgments:
    rng = np.random.default_rng(seed)
    qrels = RelevanceJudgments()
    for i in rng.choice(len(corpus), size=count, replace=False):
        qrels.set(qid, corpus.ids[i], int(rng.integers(1, max_grade + 1)))
    return qrels
