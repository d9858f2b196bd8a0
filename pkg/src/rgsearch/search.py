"""Budgeted retrieval strategies.

* :func:`rgs_search` expands the proximity graph around whatever the
  reranker currently ranks first, reranking new neighbours with a
  backward sliding window.
* :func:`retrieve_and_rerank` reranks the embedding top-k once.
* :func:`slidegar_search` alternates reranker windows between the embedding
  shortlist and a corpus-graph frontier.
* :func:`random_scan_search` reranks k uniformly random documents.

Every strategy charges a :class:`~rgsearch.core.BudgetLedger`; a document
counts against the budget the first time it enters a reranker window.
"""

from __future__ import annotations

import json
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import BudgetLedger, Corpus, InvalidInputError, QueryRecord, RankedList
from .graph_index import GraphIndex, _beam_search
from .reranker import ADMIT_TRUNCATED, REJECT, RerankerBackend, budget_gate, rerank_window

START_STRATEGIES = ("exact", "noisy", "index_default")
DEFAULT_ANN_BEAM = 64
TOP_N = 10


def default_ls(budget_k: int, window: int = 10) -> int:
    """Search-list size for a budget: 20/30/50 at k=100/300/500.

    Linear between those anchors, k/5 below 100 and k/10 above 500, never
    smaller than the window.
    """
    if budget_k < 100:
        ls = round(budget_k / 5)
    elif budget_k <= 500:
        ls = round(float(np.interp(budget_k, [100, 300, 500], [20, 30, 50])))
    else:
        ls = round(budget_k / 10)
    return max(window, ls)


@dataclass
class WindowRecord:
    docs_in: list[str]
    docs_out: list[str]
    new_docs: list[str]
    failed: bool = False
    error: str | None = None
    truncated_from: int | None = None
    hard: bool = False


@dataclass
class SearchTrace:
    """Everything a search did: expansions, reranker windows, final ranking."""

    qid: str
    method: str
    ledger: BudgetLedger
    steps: list[dict] = field(default_factory=list)
    windows: list[WindowRecord] = field(default_factory=list)
    truncations: list[dict] = field(default_factory=list)
    final: RankedList | None = None
    _pending_truncation: int | None = field(default=None, repr=False)

    @property
    def seen(self) -> set[str]:
        return self.ledger.scanned

    @property
    def failed_windows(self) -> int:
        return sum(w.failed for w in self.windows)

    @property
    def hard_failures(self) -> int:
        return sum(w.hard for w in self.windows)

    def record_window(self, docs_in, docs_out, new_docs, failed, error, hard=False) -> None:
        self.windows.append(
            WindowRecord(list(docs_in), list(docs_out), list(new_docs), failed, error, self._pending_truncation, hard)
        )
        self._pending_truncation = None

    def to_dict(self) -> dict:
        led = self.ledger
        return {
            "qid": self.qid,
            "method": self.method,
            "budget_k": led.budget_k,
            "scanned": list(led.scan_order),
            "doc_views": led.doc_views,
            "calls": led.calls,
            "tokens_in": led.tokens_in,
            "tokens_out": led.tokens_out,
            "steps": self.steps,
            "windows": [asdict(w) for w in self.windows],
            "truncations": self.truncations,
            "final": self.final.entries if self.final else [],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def write_traces(traces: Sequence[SearchTrace], fh) -> None:
    for t in traces:
        fh.write(t.to_json() + "\n")


def read_traces(lines) -> list[dict]:
    return [json.loads(line) for line in lines if line.strip()]


def sliding_window_pass(
    items: list[str],
    from_index: int,
    window: int,
    backend: RerankerBackend,
    ledger: BudgetLedger,
    query: QueryRecord,
    trace: SearchTrace | None = None,
    stop_index: int = 0,
) -> tuple[list[str], bool, int]:
    """Rerank ``items[i-w:i]`` for ``i = from_index, from_index - w/2, ...``.

    The pass ends once a window starts at or before ``stop_index``. A
    window the budget gate rejects ends the pass early with ``items`` as
    they stand. Returns ``(items, exhausted, windows_run)``.
    """
    if not 0 <= from_index <= len(items):
        raise InvalidInputError("from_index out of range")
    items = list(items)
    step = max(1, window // 2)
    i = from_index
    ran = 0
    while i > 0:
        lo = max(0, i - window)
        chunk = items[lo:i]
        gate = budget_gate(ledger, chunk)
        if gate.action == REJECT:
            return items, True, ran
        if gate.action == ADMIT_TRUNCATED:
            if trace is not None:
                trace._pending_truncation = len(chunk)
            chunk = chunk[: gate.prefix]
        items[lo : lo + len(chunk)] = rerank_window(backend, query, chunk, ledger, trace)
        ran += 1
        if lo <= stop_index:
            break
        i -= step
    return items, False, ran


# ---------------------------------------------------------------------------
# Start points
# ---------------------------------------------------------------------------


def ann_top(query: QueryRecord, index: GraphIndex, corpus: Corpus, count: int, beam: int = DEFAULT_ANN_BEAM) -> list[str]:
    found, _ = _beam_search(
        corpus.vectors, index.neighbors, [index.default_start], query.embedding, max(beam, count), corpus.id_rank
    )
    return [corpus.ids[i] for i in found[:count]]


def exhaustive_order(embedding: np.ndarray, corpus: Corpus) -> np.ndarray:
    """Corpus positions sorted by similarity to ``embedding`` (desc), then DocId."""
    sims = corpus.vectors.astype(np.float64) @ np.asarray(embedding, dtype=np.float64)
    return np.lexsort((corpus.id_rank, -sims))


def start_points(
    query: QueryRecord,
    index: GraphIndex,
    corpus: Corpus,
    strategy: str,
    count: int,
    noisy_rank: int = 1000,
    beam: int = DEFAULT_ANN_BEAM,
) -> list[str]:
    """Seed documents for the second-stage search.

    ``exact`` takes the ANN top ``count``; ``noisy`` the documents at
    exhaustive ranks ``noisy_rank .. noisy_rank + count - 1`` (1-based);
    ``index_default`` the index's start vertex, ignoring the query.
    """
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    if strategy == "exact":
        return ann_top(query, index, corpus, count, beam)
    if strategy == "noisy":
        if noisy_rank < 1 or noisy_rank + count > len(corpus):
            raise InvalidInputError(f"noisy rank {noisy_rank} + count {count} exceeds corpus size {len(corpus)}")
        order = exhaustive_order(query.embedding, corpus)
        return [corpus.ids[i] for i in order[noisy_rank - 1 : noisy_rank - 1 + count]]
    if strategy == "index_default":
        return [index.default_start_id]
    raise InvalidInputError(f"unknown start strategy {strategy!r}")


# ---------------------------------------------------------------------------
# Reranker-guided search
# ---------------------------------------------------------------------------


@dataclass
class RgsParams:
    budget_k: int
    ls: int | None = None
    window: int = 10
    seeds: int | None = None
    start_strategy: str = "exact"
    noisy_rank: int = 1000
    full_pass: bool = True
    ann_beam: int = DEFAULT_ANN_BEAM

    def __post_init__(self) -> None:
        if self.ls is None:
            self.ls = default_ls(self.budget_k, self.window)
        if self.seeds is None:
            self.seeds = max(1, self.budget_k // 5)
        if self.start_strategy not in START_STRATEGIES:
            raise InvalidInputError(f"unknown start strategy {self.start_strategy!r}")
        if self.window < 2:
            raise InvalidInputError("window must be at least 2")
        if self.seeds < 1:
            raise InvalidInputError("seeds must be >= 1")
        if self.budget_k < self.seeds:
            raise InvalidInputError(f"budget must be >= seeds (budget={self.budget_k}, seeds={self.seeds})")
        if self.ls < self.window / 2:
            raise InvalidInputError("Ls must be at least half the window")


def rgs_search(
    query: QueryRecord,
    corpus: Corpus,
    index: GraphIndex,
    backend: RerankerBackend,
    params: RgsParams,
) -> tuple[RankedList, SearchTrace]:
    """Reranker-guided greedy search over ``index``.

    Seeds are reranked into the list A. Then, repeatedly, the first
    unexpanded document of A is expanded: its out-neighbours not already in
    A are appended, a backward sliding-window pass reorders A, and A is
    cut to ``Ls``. When the budget gate refuses a window the search stops;
    unscanned documents are dropped from A and, if the interrupted pass
    had already moved documents, one more pass over the scanned remainder
    (free of budget) settles the order before the top 10 are returned.
    """
    if len(corpus) == 0 or len(index) == 0:
        raise InvalidInputError("empty corpus or index")
    index = index.aligned_to(corpus)
    ledger = BudgetLedger(params.budget_k)
    trace = SearchTrace(query.qid, "rgs", ledger)
    w, ls = params.window, params.ls
    count = min(params.seeds, len(corpus))
    seeds = start_points(query, index, corpus, params.start_strategy, count, params.noisy_rank, params.ann_beam)
    trace.steps.append({"stage": 1, "seeds": list(seeds)})

    items, exhausted, ran = sliding_window_pass(seeds, len(seeds), w, backend, ledger, query, trace)
    if not exhausted and len(items) > ls:
        trace.truncations.append({"step": 0, "dropped": items[ls:]})
        items = items[:ls]
    expanded: set[str] = set()
    step = 0
    while not exhausted:
        v = next((d for d in items if d not in expanded), None)
        if v is None:
            break
        expanded.add(v)
        step += 1
        present = set(items)
        appended = [u for u in index.out_neighbors(v) if u not in present]
        trace.steps.append({"stage": 2, "step": step, "expanded": v, "appended": appended})
        if not appended:
            continue
        first_new = len(items)
        items.extend(appended)
        stop = 0 if params.full_pass else max(0, first_new - w // 2)
        items, exhausted, ran = sliding_window_pass(items, len(items), w, backend, ledger, query, trace, stop)
        if not exhausted and len(items) > ls:
            trace.truncations.append({"step": step, "dropped": items[ls:]})
            items = items[:ls]

    if exhausted:
        items = [d for d in items if d in ledger.scanned]
        if ran:
            items, _, _ = sliding_window_pass(items, len(items), w, backend, ledger, query, trace)
        trace.steps.append({"stage": "budget_exhausted", "step": step})
    result = RankedList(query.qid, items[:TOP_N])
    trace.final = result
    return result, trace


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


def retrieve_and_rerank(
    query: QueryRecord,
    corpus: Corpus,
    index: GraphIndex,
    backend: RerankerBackend,
    k: int,
    window: int = 10,
    ann_beam: int = DEFAULT_ANN_BEAM,
) -> tuple[RankedList, SearchTrace]:
    """Rerank the ANN top-k with one backward sliding-window pass."""
    if k > len(corpus):
        raise InvalidInputError(f"k={k} exceeds corpus size {len(corpus)}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    index = index.aligned_to(corpus)
    ledger = BudgetLedger(k)
    trace = SearchTrace(query.qid, "rr", ledger)
    shortlist = ann_top(query, index, corpus, k, ann_beam)
    trace.steps.append({"stage": 1, "shortlist": shortlist})
    items, _, _ = sliding_window_pass(shortlist, len(shortlist), window, backend, ledger, query, trace)
    result = RankedList(query.qid, items[:TOP_N])
    trace.final = result
    return result, trace


def slidegar_search(
    query: QueryRecord,
    corpus: Corpus,
    knn_index: GraphIndex,
    backend: RerankerBackend,
    k: int,
    window: int = 20,
    shortlist_index: GraphIndex | None = None,
    ann_beam: int = DEFAULT_ANN_BEAM,
) -> tuple[RankedList, SearchTrace]:
    """Adaptive reranking over a corpus graph with listwise windows.

    Windows of ``window`` unscanned documents are drawn alternately from
    the embedding shortlist (ANN top-k over ``shortlist_index``, or an
    exhaustive scan when it is None) and from a FIFO frontier. The
    neighbours of the top half of each reranked window join the frontier.
    Each batch's top half is reranked together with the current top half
    of the result pool, so the pool head always holds the best documents
    seen; this merge only re-views scanned documents. Shortlist order is
    kept for documents never reranked.
    """
    if k > len(corpus):
        raise InvalidInputError(f"k={k} exceeds corpus size {len(corpus)}")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    knn_index = knn_index.aligned_to(corpus)
    ledger = BudgetLedger(k)
    trace = SearchTrace(query.qid, "slidegar", ledger)
    if shortlist_index is not None:
        initial = ann_top(query, shortlist_index.aligned_to(corpus), corpus, k, ann_beam)
    else:
        initial = [corpus.ids[i] for i in exhaustive_order(query.embedding, corpus)[:k]]
    trace.steps.append({"stage": 1, "shortlist": initial})
    shortlist = deque(initial)
    frontier: deque[str] = deque()
    queued: set[str] = set()
    pool: list[str] = []
    half = max(1, window // 2)
    from_frontier = False

    def take(source: deque[str], batch: list[str]) -> list[str]:
        while source and len(batch) < window:
            d = source.popleft()
            if d not in ledger.scanned and d not in batch:
                batch.append(d)
        return batch

    while ledger.remaining > 0 and (shortlist or frontier):
        if from_frontier and frontier:
            source, name = frontier, "frontier"
        elif shortlist:
            source, name = shortlist, "shortlist"
        else:
            source, name = frontier, "frontier"
        # a short batch is topped up from the other source so every window carries w new docs
        batch = take(frontier if source is shortlist else shortlist, take(source, []))
        from_frontier = not from_frontier
        if not batch:
            continue
        gate = budget_gate(ledger, batch)
        if gate.action == REJECT:
            break
        if gate.action == ADMIT_TRUNCATED:
            trace._pending_truncation = len(batch)
            batch = batch[: gate.prefix]
        ranked = rerank_window(backend, query, batch, ledger, trace)
        added = []
        for d in ranked[:half]:
            for u in knn_index.out_neighbors(d):
                if u not in ledger.scanned and u not in queued:
                    queued.add(u)
                    frontier.append(u)
                    added.append(u)
        trace.steps.append({"stage": 2, "source": name, "batch": batch, "frontier_added": added})
        if not pool:
            pool = ranked
        else:
            head = rerank_window(backend, query, pool[:half] + ranked[:half], ledger, trace)
            pool = head + pool[half:] + ranked[half:]
    result = RankedList(query.qid, pool[:TOP_N])
    trace.final = result
    return result, trace


def random_scan_search(
    query: QueryRecord,
    corpus: Corpus,
    backend: RerankerBackend,
    k: int,
    seed: int = 0,
    window: int = 10,
) -> tuple[RankedList, SearchTrace]:
    """Rerank ``k`` uniformly random documents; the no-structure baseline."""
    if not 1 <= k <= len(corpus):
        raise InvalidInputError(f"k must be in [1, {len(corpus)}]")
    rng = np.random.default_rng([seed, zlib.crc32(query.qid.encode("utf-8"))])
    picks = rng.choice(len(corpus), size=k, replace=False)
    ledger = BudgetLedger(k)
    trace = SearchTrace(query.qid, "random", ledger)
    items = [corpus.ids[i] for i in picks]
    items, _, _ = sliding_window_pass(items, len(items), window, backend, ledger, query, trace)
    result = RankedList(query.qid, items[:TOP_N])
    trace.final = result
    return result, trace
