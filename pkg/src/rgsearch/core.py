"""Shared domain types: corpus, queries, relevance judgments, budget ledger."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CORPUS_MAGIC = 0x52475331
_CORPUS_HEADER = struct.Struct("<IIQ")
_ID_LEN = struct.Struct("<H")


class InvalidInputError(ValueError):
    """A caller supplied arguments that violate an operation's preconditions."""


class LoadError(Exception):
    """A file could not be parsed into the expected structure."""


class BudgetExceededError(RuntimeError):
    """A ledger charge would push the scanned-document count past the budget."""


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Coerce ``values`` into a finite 1-D float32 vector."""
    vec = np.asarray(values, dtype=np.float32)
    if vec.ndim != 1 or vec.size == 0:
        raise InvalidInputError(f"embedding must be a non-empty 1-D vector, got shape {vec.shape}")
    if dim is not None and vec.size != dim:
        raise InvalidInputError(f"embedding has dim {vec.size}, expected {dim}")
    if not np.all(np.isfinite(vec)):
        raise InvalidInputError("embedding contains NaN or Inf")
    return vec


def similarity(a, b) -> float:
    """Inner product of two embeddings, accumulated in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a, b))


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (matrix / norms).astype(np.float32)


@dataclass
class Corpus:
    """Documents in insertion order, each with an embedding and optional text.

    ``vectors`` is an ``(n, dim)`` float32 matrix whose row ``i`` belongs to
    ``ids[i]``.
    """

    ids: list[str]
    vectors: np.ndarray
    texts: list[str | None] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise InvalidInputError("corpus vectors must be a 2-D matrix")
        if len(self.ids) != self.vectors.shape[0]:
            raise InvalidInputError("ids and vectors disagree on document count")
        if not self.texts:
            self.texts = [None] * len(self.ids)
        if len(self.texts) != len(self.ids):
            raise InvalidInputError("ids and texts disagree on document count")
        self.position: dict[str, int] = {}
        for i, doc_id in enumerate(self.ids):
            if doc_id in self.position:
                raise InvalidInputError(f"duplicate DocId {doc_id!r}")
            self.position[doc_id] = i
        if not np.all(np.isfinite(self.vectors)):
            raise InvalidInputError("corpus contains NaN or Inf values")
        # rank of each id in ascending DocId order, used for tie-breaking
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self.id_rank = np.empty(len(self.ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, doc_id: object) -> bool:
        return doc_id in self.position

    def __iter__(self) -> Iterator[str]:
        return iter(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def vector(self, doc_id: str) -> np.ndarray:
        return self.vectors[self.position[doc_id]]

    def text(self, doc_id: str) -> str | None:
        return self.texts[self.position[doc_id]]

    def normalized(self) -> Corpus:
        return Corpus(list(self.ids), normalize_rows(self.vectors), list(self.texts))

    def with_vectors(self, vectors: np.ndarray) -> Corpus:
        return Corpus(list(self.ids), vectors, list(self.texts))


@dataclass
class QueryRecord:
    qid: str
    embedding: np.ndarray
    text: str | None = None

    def __post_init__(self) -> None:
        self.embedding = as_embedding(self.embedding)


class RelevanceJudgments:
    """Graded (qid, DocId) judgments; absent pairs have grade 0."""

    def __init__(self, grades: dict[tuple[str, str], int] | None = None, dropped: int = 0):
        self.grades: dict[tuple[str, str], int] = {}
        self._by_query: dict[str, dict[str, int]] = {}
        self.dropped = dropped
        for (qid, doc_id), grade in (grades or {}).items():
            self.set(qid, doc_id, grade)

    def set(self, qid: str, doc_id: str, grade: int) -> None:
        if grade < 0:
            raise InvalidInputError(f"negative grade for ({qid}, {doc_id})")
        self.grades[(qid, doc_id)] = int(grade)
        self._by_query.setdefault(qid, {})[doc_id] = int(grade)

    def grade(self, qid: str, doc_id: str) -> int:
        return self.grades.get((qid, doc_id), 0)

    def for_query(self, qid: str) -> dict[str, int]:
        return self._by_query.get(qid, {})

    def positives(self, qid: str) -> list[str]:
        return sorted(d for d, g in self.for_query(qid).items() if g > 0)

    def qids(self) -> list[str]:
        return sorted(self._by_query)

    def __len__(self) -> int:
        return len(self.grades)


@dataclass
class RankedList:
    qid: str
    entries: list[str]

    def __post_init__(self) -> None:
        if len(set(self.entries)) != len(self.entries):
            raise InvalidInputError(f"ranked list for {self.qid!r} contains duplicates")


@dataclass
class BudgetLedger:
    """Per-query accounting of reranker usage.

    ``scanned`` holds every document that has appeared in at least one
    reranker window. Only first appearances count against ``budget_k``;
    re-ranking a scanned document still adds to ``doc_views`` and tokens.
    """

    budget_k: int
    scanned: set[str] = field(default_factory=set)
    scan_order: list[str] = field(default_factory=list)
    doc_views: int = 0
    calls: int = 0
    tokens_in: int = 0
    tokens_out: int = 0

    def __post_init__(self) -> None:
        if self.budget_k < 1:
            raise InvalidInputError("budget_k must be positive")

    @property
    def remaining(self) -> int:
        return self.budget_k - len(self.scanned)

    def unscanned(self, docs: Iterable[str]) -> list[str]:
        out: list[str] = []
        seen: set[str] = set()
        for d in docs:
            if d not in self.scanned and d not in seen:
                seen.add(d)
                out.append(d)
        return out

    def charge(self, window: Sequence[str]) -> list[str]:
        """Record one reranker call over ``window``; returns newly scanned docs.

        Raises BudgetExceededError without touching any counter when the
        new documents do not fit.
        """
        new = self.unscanned(window)
        if len(new) > self.remaining:
            raise BudgetExceededError(
                f"window introduces {len(new)} new documents but only {self.remaining} remain"
            )
        self.scanned.update(new)
        self.scan_order.extend(new)
        self.doc_views += len(window)
        self.calls += 1
        return new

    def add_tokens(self, tokens_in: int, tokens_out: int) -> None:
        self.tokens_in += tokens_in
        self.tokens_out += tokens_out


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------


@contextlib.contextmanager
def atomic_write(path: str | os.PathLike, mode: str = "wb"):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("jsonl", "bin"):
            raise InvalidInputError(f"unsupported embedding format {fmt!r}")
        return fmt
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) == 4 and struct.unpack("<I", head)[0] == CORPUS_MAGIC:
        return "bin"
    return "jsonl"


def _read_jsonl(path: Path) -> tuple[list[str], list[np.ndarray], list[str | None]]:
    ids: list[str] = []
    vecs: list[np.ndarray] = []
    texts: list[str | None] = []
    dim = None
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = rec["id"]
                vec = as_embedding(rec["vector"])
            except (json.JSONDecodeError, KeyError, TypeError, InvalidInputError) as exc:
                raise LoadError(f"{path}: malformed record on line {lineno}: {exc}") from exc
            if not isinstance(doc_id, str):
                raise LoadError(f"{path}: line {lineno}: id must be a string")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise LoadError(
                    f"{path}: line {lineno} (row {len(ids)}): dim {vec.size} != {dim}"
                )
            if doc_id in seen:
                raise LoadError(f"{path}: line {lineno}: duplicate id {doc_id!r}")
            seen.add(doc_id)
            ids.append(doc_id)
            vecs.append(vec)
            text = rec.get("text")
            texts.append(text if isinstance(text, str) else None)
    return ids, vecs, texts


def _read_bin(path: Path) -> tuple[list[str], np.ndarray]:
    data = path.read_bytes()
    if len(data) < _CORPUS_HEADER.size:
        raise LoadError(f"{path}: truncated header")
    magic, dim, count = _CORPUS_HEADER.unpack_from(data, 0)
    if magic != CORPUS_MAGIC:
        raise LoadError(f"{path}: bad magic 0x{magic:08x}")
    if dim == 0:
        raise LoadError(f"{path}: dim must be positive")
    offset = _CORPUS_HEADER.size
    ids: list[str] = []
    seen: set[str] = set()
    vectors = np.empty((count, dim), dtype=np.float32)
    row_bytes = 4 * dim
    for row in range(count):
        if offset + 2 > len(data):
            raise LoadError(f"{path}: truncated at record {row} (offset {offset})")
        (id_len,) = _ID_LEN.unpack_from(data, offset)
        offset += 2
        end = offset + id_len + row_bytes
        if end > len(data):
            raise LoadError(f"{path}: truncated at record {row} (offset {offset - 2})")
        try:
            doc_id = data[offset : offset + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"{path}: record {row} has invalid UTF-8 id") from exc
        if doc_id in seen:
            raise LoadError(f"{path}: record {row}: duplicate id {doc_id!r}")
        seen.add(doc_id)
        ids.append(doc_id)
        vectors[row] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset + id_len)
        offset = end
    if offset != len(data):
        raise LoadError(f"{path}: {len(data) - offset} trailing bytes after {count} records")
    if not np.all(np.isfinite(vectors)):
        bad = int(np.argwhere(~np.isfinite(vectors))[0, 0])
        raise LoadError(f"{path}: record {bad} contains NaN or Inf")
    return ids, vectors


def load_corpus(path: str | os.PathLike, format: str | None = None, normalize: bool = False) -> Corpus:
    """Load an embedding file (JSON-lines or binary) as a Corpus."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    fmt = _detect_format(path, format)
    if fmt == "bin":
        ids, vectors = _read_bin(path)
        texts: list[str | None] = [None] * len(ids)
    else:
        ids, vecs, texts = _read_jsonl(path)
        if not ids:
            raise LoadError(f"{path}: no records")
        vectors = np.stack(vecs)
    corpus = Corpus(ids, vectors, texts)
    return corpus.normalized() if normalize else corpus


def save_corpus(corpus: Corpus, path: str | os.PathLike, format: str = "jsonl") -> None:
    if format == "bin":
        with atomic_write(path, "wb") as fh:
            fh.write(_CORPUS_HEADER.pack(CORPUS_MAGIC, corpus.dim, len(corpus)))
            for doc_id, vec in zip(corpus.ids, corpus.vectors):
                raw = doc_id.encode("utf-8")
                fh.write(_ID_LEN.pack(len(raw)))
                fh.write(raw)
                fh.write(vec.astype("<f4").tobytes())
    elif format == "jsonl":
        with atomic_write(path, "w") as fh:
            for doc_id, vec, text in zip(corpus.ids, corpus.vectors, corpus.texts):
                rec = {"id": doc_id, "vector": [float(x) for x in vec]}
                if text is not None:
                    rec["text"] = text
                fh.write(json.dumps(rec) + "\n")
    else:
        raise InvalidInputError(f"unsupported embedding format {format!r}")


def load_queries(path: str | os.PathLike, format: str | None = None, normalize: bool = False) -> list[QueryRecord]:
    """Queries share the embedding file formats; ``id`` becomes the qid."""
    corpus = load_corpus(path, format, normalize)
    return [QueryRecord(q, corpus.vectors[i], corpus.texts[i]) for i, q in enumerate(corpus.ids)]


def save_queries(queries: Sequence[QueryRecord], path: str | os.PathLike, format: str = "jsonl") -> None:
    corpus = Corpus([q.qid for q in queries], np.stack([q.embedding for q in queries]), [q.text for q in queries])
    save_corpus(corpus, path, format)


def load_qrels(path: str | os.PathLike, corpus: Corpus | None = None) -> RelevanceJudgments:
    """Parse ``qid 0 docid grade`` lines.

    Labels whose DocId is not in ``corpus`` are dropped and counted in
    ``RelevanceJudgments.dropped``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"qrels file not found: {path}")
    judgments = RelevanceJudgments()
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 4:
                raise LoadError(f"{path}: line {lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError as exc:
                raise LoadError(f"{path}: line {lineno}: grade {grade_s!r} is not an integer") from exc
            if grade < 0:
                raise LoadError(f"{path}: line {lineno}: negative grade {grade}")
            if corpus is not None and doc_id not in corpus:
                dropped += 1
                continue
            judgments.set(qid, doc_id, grade)
    judgments.dropped = dropped
    if dropped:
        logger.warning("dropped %d qrels labels whose documents are not in the corpus", dropped)
    return judgments


def save_qrels(judgments: RelevanceJudgments, path: str | os.PathLike) -> None:
    with atomic_write(path, "w") as fh:
        for (qid, doc_id), grade in sorted(judgments.grades.items()):
            fh.write(f"{qid} 0 {doc_id} {grade}\n")


def max_abs_similarity_bound(*matrices: np.ndarray) -> float:
    """Cauchy-Schwarz bound on |<a, b>| over rows of the given matrices."""
    norms = [float(np.linalg.norm(m, axis=1).max()) if len(m) else 0.0 for m in matrices]
    return math.prod(norms) if len(norms) > 1 else norms[0] ** 2
