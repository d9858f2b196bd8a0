"""Reranker@k experiment sweeps.

One job per (query, method, budget). Jobs fan out to a thread pool. Rows
are sorted by qid, method and budget before anything is written, so the
output does not depend on scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import Corpus, InvalidInputError, QueryRecord, RelevanceJudgments, atomic_write
from ..graph_index import GRAPH_KINDS, BuildParams, GraphIndex, build_diskann, build_index
from ..reranker import BackendError, BackendSpec, make_backend
from ..search import (
    START_STRATEGIES,
    RgsParams,
    SearchTrace,
    random_scan_search,
    retrieve_and_rerank,
    rgs_search,
    slidegar_search,
    write_traces,
)
from .metrics import ErrorBreakdown, error_analysis, ndcg_at_10
from .perturb import perturb

logger = logging.getLogger(__name__)

METHODS = ("rr", "slidegar", "rgs", "random")
CSV_COLUMNS = ("qid", "method", "budget", "ndcg10", "scanned", "doc_views", "calls", "tokens_in", "tokens_out", "failed")
MEAN_QID = "MEAN"


class ConfigError(InvalidInputError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Perturbation:
    target: str = "query"
    w: float = 0.0
    seed: int = 0
    renormalize: bool = False

    def validate(self) -> None:
        if self.target not in ("query", "document"):
            raise ConfigError("perturb", f"target must be 'query' or 'document', got {self.target!r}")
        if not (0.0 <= self.w <= 1.0) or math.isnan(self.w):
            raise ConfigError("perturb", f"mix weight must lie in [0, 1], got {self.w}")


@dataclass
class ExperimentConfig:
    methods: tuple[str, ...] = ("rr", "rgs")
    budgets: tuple[int, ...] = (100, 300, 500)
    backend: BackendSpec = field(default_factory=BackendSpec)
    perturbation: Perturbation | None = None
    graph_kind: str = "diskann"
    build: BuildParams = field(default_factory=BuildParams)
    graph_degree: int = 16
    start_strategy: str = "exact"
    noisy_rank: int = 1000
    window: int = 10
    slidegar_window: int = 20
    ls: int | None = None
    seed: int = 0
    jobs: int = 1
    max_failed: int | None = None

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("methods", "at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if not self.budgets:
            raise ConfigError("budgets", "at least one budget is required")
        for b in self.budgets:
            if int(b) != b or b < 1:
                raise ConfigError("budgets", f"budgets must be positive integers, got {b!r}")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigError("graph", f"unknown graph kind {self.graph_kind!r}")
        if self.start_strategy not in START_STRATEGIES:
            raise ConfigError("start", f"unknown start strategy {self.start_strategy!r}")
        if self.graph_degree < 1:
            raise ConfigError("degree", "graph degree must be >= 1")
        if self.window < 2 or self.slidegar_window < 2:
            raise ConfigError("window", "windows must hold at least 2 documents")
        if self.ls is not None and self.ls < 1:
            raise ConfigError("ls", "search list size must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs", "jobs must be >= 1")
        if self.max_failed is not None and self.max_failed < 0:
            raise ConfigError("max_failed", "must be >= 0")
        if self.perturbation is not None:
            self.perturbation.validate()

    def as_dict(self) -> dict:
        d = asdict(self)
        if self.backend.http is not None:
            d["backend"]["http"] = asdict(self.backend.http)
        return d


@dataclass
class QueryRow:
    qid: str
    method: str
    budget: int
    ndcg10: float
    scanned: int
    doc_views: int
    calls: int
    tokens_in: int
    tokens_out: int
    failed: int = 0


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[QueryRow]
    aggregates: list[QueryRow]
    breakdowns: dict[str, dict[int, ErrorBreakdown]]
    traces: list[SearchTrace]

    def aggregate(self, method: str, budget: int) -> QueryRow:
        for a in self.aggregates:
            if a.method == method and a.budget == budget:
                return a
        raise KeyError((method, budget))

    def mean_ndcg(self, method: str, budget: int) -> float:
        return self.aggregate(method, budget).ndcg10

    @property
    def failed_queries(self) -> int:
        return sum(a.failed for a in self.aggregates)


def _perturbed_inputs(
    config: ExperimentConfig, corpus: Corpus, queries: Sequence[QueryRecord]
) -> tuple[Corpus, list[QueryRecord]]:
    p = config.perturbation
    if p is None or p.w == 0.0 and not p.renormalize:
        return corpus, list(queries)
    if p.target == "query":
        mixed = perturb(np.stack([q.embedding for q in queries]), p.w, p.seed, p.renormalize)
        return corpus, [QueryRecord(q.qid, mixed[i], q.text) for i, q in enumerate(queries)]
    return corpus.with_vectors(perturb(corpus.vectors, p.w, p.seed, p.renormalize)), list(queries)


def _aggregate(rows: list[QueryRow], method: str, budget: int) -> QueryRow:
    ok = [r for r in rows if not r.failed]
    failed = len(rows) - len(ok)

    def mean(attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in ok])) if ok else float("nan")

    return QueryRow(
        MEAN_QID,
        method,
        budget,
        mean("ndcg10"),
        mean("scanned"),
        mean("doc_views"),
        mean("calls"),
        mean("tokens_in"),
        mean("tokens_out"),
        failed,
    )


def run_experiment(
    config: ExperimentConfig,
    corpus: Corpus,
    queries: Sequence[QueryRecord],
    qrels: RelevanceJudgments,
    index: GraphIndex | None = None,
    graphs: dict[str, GraphIndex] | None = None,
) -> ExperimentResult:
    """Run every (query, method, budget) combination in ``config``.

    ``index`` is the DiskANN graph used for first-stage retrieval; it is
    built when missing. ``graphs`` may supply prebuilt graphs by kind. A
    document perturbation always rebuilds graphs over the perturbed
    embeddings. Oracle backends judge with the unperturbed embeddings.
    """
    config.validate()
    if not queries:
        raise InvalidInputError("no queries to evaluate")
    backend = make_backend(config.backend, corpus, qrels, queries)
    search_corpus, search_queries = _perturbed_inputs(config, corpus, queries)
    rebuilt = search_corpus is not corpus
    graphs = {} if rebuilt else dict(graphs or {})
    if index is not None and not rebuilt:
        graphs.setdefault("diskann", index)
    if index is not None and rebuilt:
        logger.warning("document perturbation: rebuilding graphs over the perturbed embeddings")

    def graph(kind: str) -> GraphIndex:
        if kind not in graphs:
            logger.info("building %s graph over %d documents", kind, len(search_corpus))
            if kind == "diskann":
                graphs[kind] = build_diskann(search_corpus, config.build)
            else:
                graphs[kind] = build_index(search_corpus, kind, config.build, degree=config.graph_degree)
        return graphs[kind]

    ann = graph("diskann")
    expand = graph(config.graph_kind) if "rgs" in config.methods else None
    knn = graph("knn") if "slidegar" in config.methods else None
    n = len(search_corpus)

    def job(q: QueryRecord, method: str, budget: int) -> tuple[QueryRow, SearchTrace | None]:
        k = min(budget, n)
        try:
            if method == "rr":
                ranked, trace = retrieve_and_rerank(q, search_corpus, ann, backend, k, config.window)
            elif method == "slidegar":
                ranked, trace = slidegar_search(
                    q, search_corpus, knn, backend, k, config.slidegar_window, shortlist_index=ann
                )
            elif method == "random":
                ranked, trace = random_scan_search(q, search_corpus, backend, k, config.seed, config.window)
            else:
                params = RgsParams(
                    k,
                    ls=config.ls,
                    window=config.window,
                    start_strategy=config.start_strategy,
                    noisy_rank=config.noisy_rank,
                )
                ranked, trace = rgs_search(q, search_corpus, expand, backend, params)
        except BackendError as exc:
            logger.error("query %s (%s@%d) failed: %s", q.qid, method, budget, exc)
            return QueryRow(q.qid, method, budget, float("nan"), 0, 0, 0, 0, 0, 1), None
        led = trace.ledger
        failed = int(trace.hard_failures > 0)
        score = float("nan") if failed else ndcg_at_10(ranked, qrels)
        row = QueryRow(
            q.qid, method, budget, score, len(led.scanned), led.doc_views, led.calls, led.tokens_in, led.tokens_out, failed
        )
        return row, trace

    tasks = [(q, m, b) for q in search_queries for m in config.methods for b in config.budgets]
    if config.jobs == 1:
        outcomes = [job(*t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(lambda t: job(*t), tasks))

    method_pos = {m: i for i, m in enumerate(config.methods)}
    key = lambda r: (r.qid, method_pos[r.method], r.budget)  # noqa: E731
    rows = sorted((o[0] for o in outcomes), key=key)
    traces = [o[1] for o in sorted(outcomes, key=lambda o: key(o[0])) if o[1] is not None]
    aggregates = [
        _aggregate([r for r in rows if r.method == m and r.budget == b], m, b)
        for m in config.methods
        for b in config.budgets
    ]
    breakdowns = {m: error_analysis([t for t in traces if t.method == m], qrels) for m in config.methods}
    return ExperimentResult(config, rows, aggregates, breakdowns, traces)


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.6f}".rstrip("0").rstrip(".") if not value.is_integer() else str(int(value))
    return str(value)


def write_results_csv(result: ExperimentResult, path: str | os.PathLike) -> None:
    """Per-query rows followed by one MEAN row per (method, budget)."""
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in result.rows + result.aggregates:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def summary_dict(result: ExperimentResult) -> dict:
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    return {
        "config": result.config.as_dict(),
        "aggregates": [{k: clean(v) for k, v in asdict(a).items() if k != "qid"} for a in result.aggregates],
        "failed_queries": result.failed_queries,
        "error_analysis": {
            m: {str(b): eb.as_dict() for b, eb in sorted(per.items())} for m, per in result.breakdowns.items()
        },
    }


def write_outputs(result: ExperimentResult, out_dir: str | os.PathLike, plots: bool = True) -> list[Path]:
    """Write results.csv, summary.json, traces.jsonl and (optionally) SVG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "results.csv", out / "summary.json", out / "traces.jsonl"]
    write_results_csv(result, written[0])
    with atomic_write(written[1], "w") as fh:
        json.dump(summary_dict(result), fh, indent=2)
        fh.write("\n")
    with atomic_write(written[2], "w") as fh:
        write_traces(result.traces, fh)
    if plots:
        from .plots import render_all

        written += render_all(result, out)
    return written
