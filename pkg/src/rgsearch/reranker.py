"""Listwise rerankers behind a single window-reorder contract.

A backend receives a query and an ordered window of DocIds and returns a
permutation of window positions, best first. :func:`rerank_window` wraps a
backend call with budget charging, permutation checks and the
keep-original-order fallback.
"""

from __future__ import annotations

import logging
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Protocol, Sequence

import httpx
import numpy as np

from .core import (
    BudgetLedger,
    Corpus,
    InvalidInputError,
    QueryRecord,
    RelevanceJudgments,
    max_abs_similarity_bound,
    similarity,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "RGS_API_KEY"
BACKEND_KINDS = ("oracle", "noisy_oracle", "static_score", "http_llm")


class BackendError(RuntimeError):
    """The reranker could not produce a usable ordering for a window."""


class RankingParseError(BackendError):
    """An LLM response contained no usable passage identifiers."""


@dataclass
class WindowResult:
    order: list[int]
    tokens_in: int = 0
    tokens_out: int = 0


class RerankerBackend(Protocol):
    kind: str

    def rerank(self, query: QueryRecord, docs: Sequence[str]) -> WindowResult: ...


def is_permutation(order: Sequence[int], n: int) -> bool:
    return len(order) == n and sorted(order) == list(range(n))


def count_tokens(text: str) -> int:
    """Whitespace token count, the proxy used when an endpoint reports no usage."""
    return len(text.split())


# ---------------------------------------------------------------------------
# Prompt protocol
# ---------------------------------------------------------------------------

_SECTION = re.compile(r"^\[(system|passage|instruction)\]$")
_PLACEHOLDER = re.compile(r"\{(query|num|index|passage)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    passage: str
    instruction: str

    @classmethod
    def load(cls, name: str = "rankgpt_v1") -> PromptTemplate:
        raw = resources.files("rgsearch.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
        sections: dict[str, list[str]] = {}
        current = None
        for line in raw.splitlines():
            m = _SECTION.match(line)
            if m:
                current = m.group(1)
                sections[current] = []
            elif current is not None:
                sections[current].append(line)
        missing = {"system", "passage", "instruction"} - sections.keys()
        if missing:
            raise InvalidInputError(f"prompt template {name!r} lacks sections {sorted(missing)}")
        body = {k: "\n".join(v).strip("\n") for k, v in sections.items()}
        return cls(name, body["system"], body["passage"], body["instruction"])


def _fill(template: str, values: Mapping[str, str]) -> str:
    # single pass, so placeholder-like text inside passages is left alone
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


@dataclass(frozen=True)
class RenderedPrompt:
    system: str
    user: str

    def as_text(self) -> str:
        return f"{self.system}\n\n{self.user}\n"

    def token_count(self) -> int:
        return count_tokens(self.system) + count_tokens(self.user)


def render_prompt(query_text: str, passages: Sequence[str], template: PromptTemplate | None = None) -> RenderedPrompt:
    template = template or PromptTemplate.load()
    num = str(len(passages))
    system = _fill(template.system, {"query": query_text, "num": num})
    lines = [_fill(template.passage, {"index": str(i), "passage": p}) for i, p in enumerate(passages, start=1)]
    lines.append(_fill(template.instruction, {"query": query_text, "num": num}))
    return RenderedPrompt(system, "\n".join(lines))


_IDENT = re.compile(r"\[(\d+)\]")


def parse_ranking(response: str, n: int) -> list[int]:
    """Turn ``"[3] > [1] > [2]"`` into a 0-based permutation.

    Out-of-range identifiers are ignored, repeated ones keep their first
    position, and identifiers the model left out are appended in original
    order. A response with no valid identifier at all raises
    :class:`RankingParseError`.
    """
    order: list[int] = []
    seen: set[int] = set()
    for m in _IDENT.finditer(response):
        i = int(m.group(1)) - 1
        if 0 <= i < n and i not in seen:
            seen.add(i)
            order.append(i)
    if not order:
        raise RankingParseError(f"no passage identifiers in response {response[:80]!r}")
    order.extend(i for i in range(n) if i not in seen)
    return order


# ---------------------------------------------------------------------------
# Ground-truth backends
# ---------------------------------------------------------------------------


def oracle_large(corpus: Corpus, query_vectors: np.ndarray) -> float:
    """A constant that makes any positive grade outweigh every similarity."""
    return 2.0 * max_abs_similarity_bound(query_vectors, corpus.vectors) + 1.0


def oracle_score(qid: str, doc: str, qrels: RelevanceJudgments, corpus: Corpus, query_embedding, large: float) -> float:
    return qrels.grade(qid, doc) * large + similarity(query_embedding, corpus.vector(doc))


class OracleBackend:
    """Orders by relevance grade, then similarity to the query, then DocId.

    ``corpus`` and ``queries`` are the reference embeddings: they stand in
    for the reranker's own view of query and documents, so perturbing the
    retrieval embeddings does not change the oracle's judgement.
    """

    kind = "oracle"

    def __init__(self, corpus: Corpus, qrels: RelevanceJudgments, queries: Sequence[QueryRecord]):
        self.corpus = corpus
        self.qrels = qrels
        self.query_vectors = {q.qid: q.embedding for q in queries}
        stacked = np.stack(list(self.query_vectors.values())) if queries else np.zeros((1, corpus.dim), np.float32)
        self.large = oracle_large(corpus, stacked)

    def _query_vector(self, query: QueryRecord) -> np.ndarray:
        return self.query_vectors.get(query.qid, query.embedding)

    def scores(self, query: QueryRecord, docs: Sequence[str]) -> list[float]:
        qvec = self._query_vector(query).astype(np.float64)
        pos = [self.corpus.position[d] for d in docs]
        sims = self.corpus.vectors[pos].astype(np.float64) @ qvec
        grades = np.array([self.qrels.grade(query.qid, d) for d in docs], dtype=np.float64)
        return (grades * self.large + sims).tolist()

    def rerank(self, query: QueryRecord, docs: Sequence[str]) -> WindowResult:
        scores = self.scores(query, docs)
        order = sorted(range(len(docs)), key=lambda i: (-scores[i], docs[i]))
        return WindowResult(order, *_proxy_tokens(self.corpus, query, docs))


class NoisyOracleBackend(OracleBackend):
    """Oracle score (scaled to grade units) plus seeded Gaussian noise.

    The noise for a (qid, doc) pair is fixed by the seed, so a document is
    judged the same way every time it reappears in a window.
    """

    kind = "noisy_oracle"

    def __init__(self, corpus: Corpus, qrels: RelevanceJudgments, queries: Sequence[QueryRecord], sigma: float, seed: int = 0):
        if sigma < 0:
            raise InvalidInputError("score_noise_sigma must be non-negative")
        super().__init__(corpus, qrels, queries)
        self.sigma = sigma
        self.seed = seed
        self._noise: dict[tuple[str, str], float] = {}
        self._lock = threading.Lock()

    def noise(self, qid: str, doc: str) -> float:
        key = (qid, doc)
        with self._lock:
            if key not in self._noise:
                self._noise[key] = random.Random(f"{self.seed}\x1f{qid}\x1f{doc}").gauss(0.0, 1.0)
            return self._noise[key]

    def scores(self, query: QueryRecord, docs: Sequence[str]) -> list[float]:
        base = super().scores(query, docs)
        if self.sigma == 0:
            return base
        return [s / self.large + self.sigma * self.noise(query.qid, d) for s, d in zip(base, docs)]


class StaticScoreBackend:
    """Scores by the retrieval similarity itself; a no-op reranker."""

    kind = "static_score"

    def __init__(self, corpus: Corpus):
        self.corpus = corpus

    def rerank(self, query: QueryRecord, docs: Sequence[str]) -> WindowResult:
        qvec = query.embedding.astype(np.float64)
        sims = self.corpus.vectors[[self.corpus.position[d] for d in docs]].astype(np.float64) @ qvec
        order = sorted(range(len(docs)), key=lambda i: (-sims[i], docs[i]))
        return WindowResult(order, *_proxy_tokens(self.corpus, query, docs))


def _proxy_tokens(corpus: Corpus, query: QueryRecord, docs: Sequence[str]) -> tuple[int, int]:
    """Token usage an LLM reranker would have incurred, when texts exist."""
    texts = [corpus.text(d) for d in docs]
    if query.text is None or any(t is None for t in texts):
        return 0, 0
    prompt = render_prompt(query.text, texts)
    return prompt.token_count(), 2 * len(docs) - 1


# ---------------------------------------------------------------------------
# HTTP LLM backend
# ---------------------------------------------------------------------------


@dataclass
class HttpRerankerConfig:
    endpoint: str
    model: str
    template: str = "rankgpt_v1"
    max_retries: int = 3
    timeout: float = 60.0
    rate_limit: float = 0.0
    response_path: str = "choices.0.message.content"
    usage_in_path: str | None = "usage.prompt_tokens"
    usage_out_path: str | None = "usage.completion_tokens"
    backoff: float = 0.5
    max_window: int = 10

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise InvalidInputError("max_retries must be >= 0")
        if self.rate_limit < 0:
            raise InvalidInputError("rate_limit must be >= 0")


def _dig(payload: Any, path: str) -> Any:
    cur = payload
    for part in path.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, dict):
            cur = cur[part]
        else:
            raise KeyError(part)
    return cur


class _RateLimiter:
    def __init__(self, per_second: float):
        self.interval = 1.0 / per_second if per_second > 0 else 0.0
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


class HttpLLMBackend:
    """Sends the listwise prompt to a chat-style HTTP endpoint.

    The API key, when needed, is read from ``$RGS_API_KEY`` and sent as a
    bearer token.
    """

    kind = "http_llm"

    def __init__(self, config: HttpRerankerConfig, corpus: Corpus, client: httpx.Client | None = None):
        self.config = config
        self.corpus = corpus
        self.template = PromptTemplate.load(config.template)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self.client = client or httpx.Client(timeout=config.timeout)
        self.headers = headers
        self.limiter = _RateLimiter(config.rate_limit)

    def rerank(self, query: QueryRecord, docs: Sequence[str]) -> WindowResult:
        if query.text is None:
            raise BackendError(f"query {query.qid!r} has no text")
        texts = []
        for d in docs:
            t = self.corpus.text(d)
            if t is None:
                raise BackendError(f"document {d!r} has no text payload")
            texts.append(t)
        return llm_rerank_call(self, query.text, texts)

    def post(self, body: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.config.backoff * 2 ** (attempt - 1))
            self.limiter.wait()
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=self.headers, timeout=self.config.timeout)
            except httpx.TransportError as exc:
                last = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = BackendError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError("endpoint returned non-JSON body") from exc
        raise BackendError(f"request failed after {self.config.max_retries + 1} attempts: {last}")


def llm_rerank_call(backend: HttpLLMBackend, query_text: str, window_texts: Sequence[str]) -> WindowResult:
    cfg = backend.config
    if not 1 <= len(window_texts) <= cfg.max_window:
        raise InvalidInputError(f"window of {len(window_texts)} passages exceeds the prompt limit of {cfg.max_window}")
    prompt = render_prompt(query_text, window_texts, backend.template)
    body = {
        "model": cfg.model,
        "system": prompt.system,
        "messages": [{"role": "user", "content": prompt.user}],
    }
    payload = backend.post(body)
    try:
        text = _dig(payload, cfg.response_path)
    except (KeyError, IndexError, ValueError, TypeError) as exc:
        raise BackendError(f"response has no text at {cfg.response_path!r}") from exc
    if not isinstance(text, str):
        raise BackendError(f"value at {cfg.response_path!r} is not text")
    order = parse_ranking(text, len(window_texts))
    tokens_in, tokens_out = prompt.token_count(), count_tokens(text)
    for path, attr in ((cfg.usage_in_path, "in"), (cfg.usage_out_path, "out")):
        if not path:
            continue
        try:
            value = int(_dig(payload, path))
        except (KeyError, IndexError, ValueError, TypeError):
            continue
        if attr == "in":
            tokens_in = value
        else:
            tokens_out = value
    return WindowResult(order, tokens_in, tokens_out)


# ---------------------------------------------------------------------------
# Budget enforcement
# ---------------------------------------------------------------------------

ADMIT_FULL = "admit_full"
ADMIT_TRUNCATED = "admit_truncated"
REJECT = "reject"


@dataclass(frozen=True)
class GateDecision:
    action: str
    prefix: int
    new_docs: int

    @property
    def admitted(self) -> bool:
        return self.action != REJECT


def budget_gate(ledger: BudgetLedger, window: Sequence[str]) -> GateDecision:
    """Decide how much of ``window`` may be sent to the reranker.

    Admits the whole window when its unscanned documents fit the remaining
    budget, otherwise the longest prefix whose unscanned documents fit. A
    window whose first unscanned document already does not fit is rejected.
    """
    remaining = ledger.remaining
    new = 0
    fresh: set[str] = set()
    for i, doc in enumerate(window):
        if doc in ledger.scanned or doc in fresh:
            continue
        if new == remaining:
            if new == 0:
                return GateDecision(REJECT, 0, 0)
            return GateDecision(ADMIT_TRUNCATED, i, new)
        new += 1
        fresh.add(doc)
    return GateDecision(ADMIT_FULL, len(window), new)


class WindowRecorder(Protocol):
    def record_window(
        self, docs_in: Sequence[str], docs_out: Sequence[str], new_docs: Sequence[str], failed: bool, error: str | None, hard: bool
    ) -> None: ...


def rerank_window(
    backend: RerankerBackend,
    query: QueryRecord,
    window: Sequence[str],
    ledger: BudgetLedger,
    trace: WindowRecorder | None = None,
) -> list[str]:
    """Charge ``ledger`` for one call over ``window`` and return it reordered.

    Backend errors and non-permutation answers leave the window in its
    original order; the failure is recorded on ``trace``.
    """
    window = list(window)
    if not window:
        raise InvalidInputError("window must not be empty")
    new_docs = ledger.charge(window)
    failed, error = False, None
    try:
        result = backend.rerank(query, window)
        if not is_permutation(result.order, len(window)):
            raise BackendError(f"backend returned a non-permutation {result.order!r}")
        ledger.add_tokens(result.tokens_in, result.tokens_out)
        out = [window[i] for i in result.order]
    except BackendError as exc:
        logger.warning("reranker failure on query %s: %s", query.qid, exc)
        failed, error = True, str(exc)
        # a garbled ranking is a soft failure; transport and HTTP errors are hard
        hard = not isinstance(exc, RankingParseError)
        out = window
    else:
        hard = False
    if trace is not None:
        trace.record_window(window, out, new_docs, failed, error, hard)
    return out


@dataclass
class BackendSpec:
    """Serializable description of a backend, used by the experiment runner."""

    kind: str = "oracle"
    sigma: float = 0.0
    seed: int = 0
    http: HttpRerankerConfig | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise InvalidInputError(f"unknown backend kind {self.kind!r}")


def make_backend(spec: BackendSpec, corpus: Corpus, qrels: RelevanceJudgments | None, queries: Sequence[QueryRecord]) -> RerankerBackend:
    if spec.kind in ("oracle", "noisy_oracle"):
        if qrels is None:
            raise InvalidInputError(f"{spec.kind} backend requires relevance judgments")
        if spec.kind == "oracle":
            return OracleBackend(corpus, qrels, queries)
        return NoisyOracleBackend(corpus, qrels, queries, spec.sigma, spec.seed)
    if spec.kind == "static_score":
        return StaticScoreBackend(corpus)
    if spec.http is None:
        raise InvalidInputError("http_llm backend requires an endpoint configuration")
    return HttpLLMBackend(spec.http, corpus)
