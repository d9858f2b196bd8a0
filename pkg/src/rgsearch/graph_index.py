"""Proximity graphs over a corpus: Vamana (DiskANN) construction, exact KNN
graphs, random regular graphs, greedy beam search, and a binary file format.

Graph construction measures closeness with Euclidean distance. Query-time
search ranks by inner product, the retrieval similarity used everywhere
else; on L2-normalised embeddings the two orderings coincide.
"""

from __future__ import annotations

import os
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Corpus, InvalidInputError, LoadError, atomic_write

INDEX_MAGIC = 0x52475347
INDEX_VERSION = 1
GRAPH_KINDS = ("diskann", "knn", "random")
_HEADER = struct.Struct("<IIIII")
_U16 = struct.Struct("<H")


@dataclass
class BuildParams:
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    seed: int = 0
    two_pass: bool = True
    medoid_sample: int = 1000

    def __post_init__(self) -> None:
        if self.R < 2:
            raise InvalidInputError("R must be at least 2")
        if self.L_build < self.R:
            raise InvalidInputError("L_build must be at least R")
        if self.alpha < 1:
            raise InvalidInputError("alpha must be at least 1")


@dataclass
class GraphIndex:
    """Directed graph over document ids.

    ``neighbors[i]`` lists out-neighbour positions of ``ids[i]``. When the
    index is aligned with a corpus (see :meth:`aligned_to`) positions are
    shared with ``corpus.ids``.
    """

    ids: list[str]
    neighbors: list[list[int]]
    degree_bound: int
    default_start: int
    kind: str = "diskann"
    _position: dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in GRAPH_KINDS:
            raise InvalidInputError(f"unknown graph kind {self.kind!r}")
        if len(self.neighbors) != len(self.ids):
            raise InvalidInputError("ids and neighbours disagree on vertex count")
        if not 0 <= self.default_start < len(self.ids):
            raise InvalidInputError("default_start is not a vertex of the graph")
        self._position = {d: i for i, d in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def default_start_id(self) -> str:
        return self.ids[self.default_start]

    @property
    def adjacency(self) -> dict[str, list[str]]:
        return {d: [self.ids[j] for j in nb] for d, nb in zip(self.ids, self.neighbors)}

    def out_neighbors(self, doc_id: str) -> list[str]:
        return [self.ids[j] for j in self.neighbors[self._position[doc_id]]]

    def degrees(self) -> np.ndarray:
        return np.fromiter((len(nb) for nb in self.neighbors), dtype=np.int64, count=len(self.ids))

    def reachable_fraction(self, start: int | None = None) -> float:
        start = self.default_start if start is None else start
        seen = np.zeros(len(self.ids), dtype=bool)
        seen[start] = True
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for u in self.neighbors[v]:
                if not seen[u]:
                    seen[u] = True
                    queue.append(u)
        return float(seen.mean())

    def stats(self) -> dict:
        deg = self.degrees()
        return {
            "kind": self.kind,
            "n": len(self.ids),
            "R": self.degree_bound,
            "max_degree": int(deg.max()),
            "mean_degree": float(deg.mean()),
            "reachable_pct": 100.0 * self.reachable_fraction(),
            "default_start": self.default_start_id,
        }

    def aligned_to(self, corpus: Corpus) -> GraphIndex:
        """Re-express the graph in ``corpus`` positions.

        Every index id must exist in the corpus. Corpus documents absent
        from the index get no out-edges.
        """
        if self.ids == corpus.ids:
            return self
        for d in self.ids:
            if d not in corpus:
                raise InvalidInputError(f"index references DocId {d!r} missing from the corpus")
        remap = [corpus.position[d] for d in self.ids]
        neighbors: list[list[int]] = [[] for _ in range(len(corpus))]
        for i, nb in enumerate(self.neighbors):
            neighbors[remap[i]] = [remap[j] for j in nb]
        return GraphIndex(list(corpus.ids), neighbors, self.degree_bound, remap[self.default_start], self.kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraphIndex):
            return NotImplemented
        return (
            self.ids == other.ids
            and [list(n) for n in self.neighbors] == [list(n) for n in other.neighbors]
            and self.degree_bound == other.degree_bound
            and self.default_start == other.default_start
            and self.kind == other.kind
        )


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _beam_search(
    vectors: np.ndarray,
    neighbors: Sequence[Sequence[int]],
    starts: Iterable[int],
    target: np.ndarray,
    beam: int,
    id_rank: np.ndarray,
    bias: np.ndarray | None = None,
) -> tuple[list[int], list[int]]:
    """Best-first beam search maximising ``vectors @ target (+ bias)``.

    Returns the final beam (best first) and the expanded vertices in
    expansion order.
    """
    starts = list(dict.fromkeys(starts))
    seen = set(starts)
    idx = np.asarray(starts, dtype=np.int64)
    scores = vectors[idx] @ target
    if bias is not None:
        scores = scores + bias[idx]
    beam_list = sorted(zip((-scores).tolist(), id_rank[idx].tolist(), starts))
    del beam_list[beam:]
    expanded: set[int] = set()
    order: list[int] = []
    while True:
        for entry in beam_list:
            if entry[2] not in expanded:
                v = entry[2]
                break
        else:
            break
        expanded.add(v)
        order.append(v)
        fresh = [u for u in neighbors[v] if u not in seen]
        if not fresh:
            continue
        seen.update(fresh)
        idx = np.asarray(fresh, dtype=np.int64)
        scores = vectors[idx] @ target
        if bias is not None:
            scores = scores + bias[idx]
        worst = beam_list[-1] if len(beam_list) >= beam else None
        added = False
        for entry in zip((-scores).tolist(), id_rank[idx].tolist(), fresh):
            if worst is None or entry < worst:
                beam_list.append(entry)
                added = True
        if added:
            beam_list.sort()
            del beam_list[beam:]
    return [e[2] for e in beam_list], order


def greedy_beam_search(
    index: GraphIndex,
    corpus: Corpus,
    start_set: Iterable[str],
    target,
    beam: int,
    k: int,
) -> tuple[list[str], set[str]]:
    """Return the ``k`` visited documents most similar to ``target`` and the visited set.

    Ties are broken by ascending DocId.
    """
    starts = list(start_set)
    if not starts:
        raise InvalidInputError("start_set must be non-empty")
    if not 1 <= k <= beam:
        raise InvalidInputError("require beam >= k >= 1")
    index = index.aligned_to(corpus)
    target = np.asarray(target, dtype=np.float32)
    if target.shape != (corpus.dim,):
        raise InvalidInputError(f"target has shape {target.shape}, expected ({corpus.dim},)")
    found, visited = _beam_search(
        corpus.vectors, index.neighbors, [corpus.position[s] for s in starts], target, beam, corpus.id_rank
    )
    return [corpus.ids[i] for i in found[:k]], {corpus.ids[i] for i in visited}


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _prune(vectors: np.ndarray, id_rank: np.ndarray, p: int, candidates: Iterable[int], alpha: float, R: int) -> list[int]:
    cand = np.fromiter((c for c in set(candidates) if c != p), dtype=np.int64)
    if cand.size == 0:
        return []
    pts = vectors[cand].astype(np.float64)
    diff = pts - vectors[p]
    d_p = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((id_rank[cand], d_p))
    cand, pts, d_p = cand[order], pts[order], d_p[order]
    sq = np.einsum("ij,ij->i", pts, pts)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T), 0.0))
    np.fill_diagonal(dist, 0.0)
    evict = alpha * dist <= d_p[None, :]
    alive = np.ones(cand.size, dtype=bool)
    out: list[int] = []
    for i in range(cand.size):
        if not alive[i]:
            continue
        out.append(int(cand[i]))
        if len(out) == R:
            break
        alive &= ~evict[i]
    return out


def robust_prune(p: str, candidates: Iterable[str], alpha: float, R: int, corpus: Corpus) -> list[str]:
    """Select at most ``R`` diverse neighbours for ``p``.

    Candidates are visited nearest first. Each kept neighbour ``n`` evicts
    every remaining candidate ``c`` with ``alpha * d(n, c) <= d(p, c)``.
    """
    cand = set(candidates)
    if p in cand:
        raise InvalidInputError("p must not be among its own candidates")
    kept = _prune(corpus.vectors, corpus.id_rank, corpus.position[p], (corpus.position[c] for c in cand), alpha, R)
    return [corpus.ids[i] for i in kept]


def _medoid(vectors: np.ndarray, id_rank: np.ndarray, rng: np.random.Generator, sample: int) -> int:
    n = vectors.shape[0]
    pool = np.arange(n) if n <= sample else np.sort(rng.choice(n, size=sample, replace=False))
    pts = vectors[pool].astype(np.float64)
    sq = (pts * pts).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pts @ pts.T, 0.0)
    total = np.sqrt(d2).sum(axis=1)
    best = np.lexsort((id_rank[pool], total))[0]
    return int(pool[best])


def build_diskann(corpus: Corpus, params: BuildParams | None = None) -> GraphIndex:
    """Vamana graph construction.

    Points are inserted one at a time in a seeded random order. Each
    insertion searches from the medoid, prunes the visited set into the
    point's neighbour list, then adds reverse edges and re-prunes any vertex
    that overflows ``R``. With ``two_pass`` the whole sweep runs first with
    ``alpha=1`` and then with ``params.alpha``. The schedule is sequential,
    so the result depends only on the corpus and the params.
    """
    params = params or BuildParams()
    n = len(corpus)
    if n < 2:
        raise InvalidInputError("corpus must contain at least 2 documents")
    vectors, id_rank = corpus.vectors, corpus.id_rank
    R = params.R
    rng = np.random.default_rng(params.seed)
    start = _medoid(vectors, id_rank, rng, params.medoid_sample)
    bias = -0.5 * np.einsum("ij,ij->i", vectors, vectors)
    # random regular starting graph supplies the long-range edges
    neighbors = _random_neighbors(n, min(R, n - 1), rng)
    members = [set(nb) for nb in neighbors]
    order = rng.permutation(n).tolist()
    alphas = (1.0, params.alpha) if params.two_pass else (params.alpha,)
    for alpha in alphas:
        for p in order:
            _, visited = _beam_search(vectors, neighbors, [start], vectors[p], params.L_build, id_rank, bias)
            chosen = _prune(vectors, id_rank, p, set(visited) | members[p], alpha, R)
            neighbors[p] = chosen
            members[p] = set(chosen)
            for j in chosen:
                if p in members[j]:
                    continue
                if len(neighbors[j]) < R:
                    neighbors[j].append(p)
                    members[j].add(p)
                else:
                    pruned = _prune(vectors, id_rank, j, members[j] | {p}, alpha, R)
                    neighbors[j] = pruned
                    members[j] = set(pruned)
    return GraphIndex(list(corpus.ids), neighbors, R, start, "diskann")


def _exact_knn(vectors: np.ndarray, id_rank: np.ndarray, k: int) -> list[list[int]]:
    pts = vectors.astype(np.float64)
    out: list[list[int]] = []
    for v in range(pts.shape[0]):
        diff = pts - pts[v]
        row = np.einsum("ij,ij->i", diff, diff)
        row[v] = np.inf
        kth = np.partition(row, k - 1)[k - 1]
        # everything tied with the k-th distance competes on DocId
        part = np.flatnonzero(row <= kth)
        out.append(part[np.lexsort((id_rank[part], row[part]))][:k].tolist())
    return out


def build_knn(corpus: Corpus, k: int) -> GraphIndex:
    """Connect each document to its ``k`` exact nearest neighbours (Euclidean)."""
    n = len(corpus)
    if not 1 <= k < n:
        raise InvalidInputError(f"knn degree must satisfy 1 <= k < n (k={k}, n={n})")
    neighbors = _exact_knn(corpus.vectors, corpus.id_rank, k)
    start = _medoid(corpus.vectors, corpus.id_rank, np.random.default_rng(0), 1000)
    return GraphIndex(list(corpus.ids), neighbors, k, start, "knn")


def _random_neighbors(n: int, degree: int, rng: np.random.Generator) -> list[list[int]]:
    out: list[list[int]] = []
    for v in range(n):
        picks = rng.choice(n - 1, size=degree, replace=False)
        picks[picks >= v] += 1
        out.append(picks.tolist())
    return out


def build_random(corpus: Corpus, degree: int, seed: int = 0) -> GraphIndex:
    """Give each document ``degree`` distinct uniformly random out-neighbours."""
    n = len(corpus)
    if not 1 <= degree < n:
        raise InvalidInputError(f"random degree must satisfy 1 <= degree < n (degree={degree}, n={n})")
    rng = np.random.default_rng(seed)
    neighbors = _random_neighbors(n, degree, rng)
    start = _medoid(corpus.vectors, corpus.id_rank, np.random.default_rng(seed), 1000)
    return GraphIndex(list(corpus.ids), neighbors, degree, start, "random")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _pack_id(doc_id: str) -> bytes:
    raw = doc_id.encode("utf-8")
    return _U16.pack(len(raw)) + raw


def save_index(index: GraphIndex, path: str | os.PathLike) -> None:
    """Layout (little endian): magic, version, R, n, kind (u32 each); default
    start id; then per vertex its id, a u16 neighbour count and neighbour ids.
    Ids are u16-length-prefixed UTF-8.
    """
    packed = [_pack_id(d) for d in index.ids]
    with atomic_write(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.degree_bound, len(index.ids), GRAPH_KINDS.index(index.kind)))
        fh.write(packed[index.default_start])
        for i, nb in enumerate(index.neighbors):
            fh.write(packed[i])
            fh.write(_U16.pack(len(nb)))
            fh.write(b"".join(packed[j] for j in nb))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.offset, self.path = data, 0, path

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise LoadError(f"{self.path}: truncated at offset {self.offset}")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def doc_id(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise LoadError(f"{self.path}: invalid UTF-8 id at offset {self.offset}") from exc


def load_index(path: str | os.PathLike, corpus: Corpus | None = None) -> GraphIndex:
    """Read an index file; with ``corpus`` the result is aligned to it."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"index file not found: {path}")
    rd = _Reader(path.read_bytes(), path)
    magic, version, R, n, kind = _HEADER.unpack(rd.take(_HEADER.size))
    if magic != INDEX_MAGIC:
        raise LoadError(f"{path}: bad magic 0x{magic:08x}")
    if version != INDEX_VERSION:
        raise LoadError(f"{path}: unsupported index version {version} (expected {INDEX_VERSION})")
    if kind >= len(GRAPH_KINDS):
        raise LoadError(f"{path}: unknown graph kind code {kind}")
    start_id = rd.doc_id()
    ids: list[str] = []
    raw_neighbors: list[list[str]] = []
    for _ in range(n):
        ids.append(rd.doc_id())
        count = rd.u16()
        raw_neighbors.append([rd.doc_id() for _ in range(count)])
    if rd.offset != len(rd.data):
        raise LoadError(f"{path}: {len(rd.data) - rd.offset} trailing bytes")
    position = {d: i for i, d in enumerate(ids)}
    if len(position) != n:
        raise LoadError(f"{path}: duplicate vertex ids")
    try:
        neighbors = [[position[d] for d in nb] for nb in raw_neighbors]
        start = position[start_id]
    except KeyError as exc:
        raise LoadError(f"{path}: edge to unknown vertex {exc.args[0]!r}") from None
    index = GraphIndex(ids, neighbors, R, start, GRAPH_KINDS[kind])
    if corpus is not None:
        missing = next((d for d in ids if d not in corpus), None)
        if missing is not None:
            raise LoadError(f"{path}: index DocId {missing!r} is missing from the supplied corpus")
        index = index.aligned_to(corpus)
    return index


def build_index(corpus: Corpus, kind: str, params: BuildParams | None = None, degree: int | None = None) -> GraphIndex:
    params = params or BuildParams()
    if kind == "diskann":
        return build_diskann(corpus, params)
    if kind == "knn":
        return build_knn(corpus, degree or params.R)
    if kind == "random":
        return build_random(corpus, degree or params.R, params.seed)
    raise InvalidInputError(f"unknown graph kind {kind!r}")
