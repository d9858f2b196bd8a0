"""Planted-cluster corpora with controllable first-stage difficulty.

Documents are Gaussian clusters on the unit sphere. A query's relevant
documents are the members of one cluster lying furthest along a random
direction ``-g``; the query is pushed along ``+g`` until at least
``planted_rank_offset`` other documents (mostly same-cluster hard
negatives) outrank every relevant one by inner product. Relevant and
irrelevant members of the cluster stay graph neighbours, so a search that
follows document-document similarity can still reach the answers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..core import Corpus, InvalidInputError, QueryRecord, RelevanceJudgments, normalize_rows


@dataclass(frozen=True)
class SyntheticParams:
    n: int = 5000
    dim: int = 64
    clusters: int = 20
    queries: int = 100
    relevant_per_query: int = 20
    cluster_spread: float = 0.6
    planted_rank_offset: int = 200
    seed: int = 7
    bridge_fraction: float = 0.4

    def as_dict(self) -> dict:
        return asdict(self)


# desk-scale stand-in for a benchmark whose answers sit outside the top-100
HARD_FIXTURE = SyntheticParams()
EASY_FIXTURE = SyntheticParams(planted_rank_offset=0)


def _first_relevant_rank(vectors: np.ndarray, q: np.ndarray, relevant: np.ndarray, id_rank: np.ndarray) -> int:
    sims = vectors.astype(np.float64) @ q.astype(np.float64)
    order = np.lexsort((id_rank, -sims))
    mask = np.zeros(len(vectors), dtype=bool)
    mask[relevant] = True
    return int(np.flatnonzero(mask[order])[0])


def relevant_ranks(corpus: Corpus, query: QueryRecord, qrels: RelevanceJudgments) -> list[int]:
    """0-based exhaustive similarity ranks of the query's positive documents."""
    sims = corpus.vectors.astype(np.float64) @ query.embedding.astype(np.float64)
    order = np.lexsort((corpus.id_rank, -sims))
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return sorted(int(rank[corpus.position[d]]) for d in qrels.positives(query.qid))


def gen_synthetic(
    n: int,
    dim: int,
    clusters: int,
    queries: int,
    relevant_per_query: int,
    cluster_spread: float,
    planted_rank_offset: int,
    seed: int,
    bridge_fraction: float = 0.0,
) -> tuple[Corpus, list[QueryRecord], RelevanceJudgments]:
    """Generate ``(corpus, queries, qrels)``; identical for identical arguments.

    A ``bridge_fraction`` of the documents sit on segments between two random
    cluster centres. They never count as relevant but give the corpus the
    continuous topic structure that greedy graph search relies on.
    """
    if not 0.0 <= bridge_fraction < 1.0:
        raise InvalidInputError("bridge_fraction must lie in [0, 1)")
    if min(n, dim, clusters, queries, relevant_per_query) < 1 or cluster_spread <= 0 or planted_rank_offset < 0:
        raise InvalidInputError("synthetic parameters must be positive")
    if clusters > n:
        raise InvalidInputError("more clusters than documents")
    if relevant_per_query > n // clusters:
        raise InvalidInputError(f"relevant_per_query={relevant_per_query} exceeds the cluster size {n // clusters}")
    if planted_rank_offset > n - relevant_per_query:
        raise InvalidInputError(
            f"planted_rank_offset={planted_rank_offset} is infeasible for n={n} with {relevant_per_query} relevant documents"
        )
    rng = np.random.default_rng(seed)
    centers = normalize_rows(rng.standard_normal((clusters, dim)))
    labels = rng.permutation(np.arange(n) % clusters)
    noise = rng.standard_normal((n, dim)) * (cluster_spread / np.sqrt(dim))
    base = centers[labels]
    bridge = rng.random(n) < bridge_fraction
    partner = rng.integers(clusters, size=n)
    mix = rng.random(n)[:, None]
    base = np.where(bridge[:, None], (1.0 - mix) * base + mix * centers[partner], base)
    vectors = normalize_rows(base + noise)
    width = len(str(n - 1))
    ids = [f"d{i:0{width}d}" for i in range(n)]
    texts = [f"passage {ids[i]} on topic {labels[i]}" for i in range(n)]
    corpus = Corpus(ids, vectors, texts)

    qwidth = len(str(queries - 1))
    records: list[QueryRecord] = []
    qrels = RelevanceJudgments()
    for j in range(queries):
        qid = f"q{j:0{qwidth}d}"
        topic = int(rng.integers(clusters))
        members = np.flatnonzero((labels == topic) & ~bridge)
        if len(members) < relevant_per_query:
            raise InvalidInputError(f"topic {topic} has only {len(members)} non-bridge documents")
        g = rng.standard_normal(dim)
        g -= (g @ centers[topic]) * centers[topic]
        g /= np.linalg.norm(g)
        proj = vectors[members].astype(np.float64) @ g
        relevant = members[np.lexsort((corpus.id_rank[members], proj))[:relevant_per_query]]
        anchor = vectors[relevant].astype(np.float64).mean(axis=0)
        anchor /= np.linalg.norm(anchor)

        def place(lam: float) -> np.ndarray:
            q = anchor + lam * g
            return q / np.linalg.norm(q)

        if planted_rank_offset == 0:
            q = place(0.0)
        else:
            lo, hi = 0.0, 1.0
            while _first_relevant_rank(vectors, place(hi), relevant, corpus.id_rank) < planted_rank_offset:
                hi *= 2.0
                if hi > 1e6:
                    raise InvalidInputError(f"cannot push relevant documents to rank {planted_rank_offset}")
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if _first_relevant_rank(vectors, place(mid), relevant, corpus.id_rank) >= planted_rank_offset:
                    hi = mid
                else:
                    lo = mid
            # step past the boundary until the float32 query still verifies
            for _ in range(60):
                q = place(hi)
                if _first_relevant_rank(vectors, q.astype(np.float32), relevant, corpus.id_rank) >= planted_rank_offset:
                    break
                hi = hi * 1.01 + 1e-6
        rec = QueryRecord(qid, q.astype(np.float32), f"query {qid} on topic {topic}")
        if _first_relevant_rank(vectors, rec.embedding, relevant, corpus.id_rank) < planted_rank_offset:
            raise InvalidInputError(f"query {qid}: relevant document placement failed verification")
        records.append(rec)
        for d in relevant:
            qrels.set(qid, ids[d], 1)
    return corpus, records, qrels


def gen_from_params(params: SyntheticParams) -> tuple[Corpus, list[QueryRecord], RelevanceJudgments]:
    return gen_synthetic(**params.as_dict())
