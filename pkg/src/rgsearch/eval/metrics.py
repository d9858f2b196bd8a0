"""NDCG@10 and ground-truth coverage breakdowns."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from ..core import RankedList, RelevanceJudgments


def _gain(grade: int) -> float:
    return float(2**grade - 1)


def ndcg_at_10(ranked: RankedList | Sequence[str], qrels: RelevanceJudgments, qid: str | None = None, depth: int = 10) -> float:
    """NDCG over the first ``depth`` entries with gain ``2**grade - 1``.

    Returns 0 when the query has no positively graded document.
    """
    if isinstance(ranked, RankedList):
        qid = ranked.qid if qid is None else qid
        entries = ranked.entries
    else:
        entries = list(ranked)
    if qid is None:
        raise ValueError("qid is required for a bare sequence")
    dcg = sum(_gain(qrels.grade(qid, d)) / math.log2(i + 2) for i, d in enumerate(entries[:depth]))
    ideal = sorted((g for g in qrels.for_query(qid).values() if g > 0), reverse=True)[:depth]
    idcg = sum(_gain(g) / math.log2(i + 2) for i, g in enumerate(ideal))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class ErrorBreakdown:
    """Where the positively judged documents ended up, pooled over queries."""

    budget: int
    returned: int
    seen_not_selected: int
    never_seen: int

    @property
    def total(self) -> int:
        return self.returned + self.seen_not_selected + self.never_seen

    def fractions(self) -> tuple[float, float, float]:
        if not self.total:
            return 0.0, 0.0, 0.0
        t = self.total
        return self.returned / t, self.seen_not_selected / t, self.never_seen / t

    @property
    def fraction_returned(self) -> float:
        return self.fractions()[0]

    @property
    def fraction_seen_not_selected(self) -> float:
        return self.fractions()[1]

    @property
    def fraction_never_seen(self) -> float:
        return self.fractions()[2]

    def as_dict(self) -> dict:
        r, s, n = self.fractions()
        return {
            "budget": self.budget,
            "positives": self.total,
            "fraction_returned": r,
            "fraction_seen_not_selected": s,
            "fraction_never_seen": n,
        }


def classify_positives(qid: str, final: Iterable[str], seen: Iterable[str], qrels: RelevanceJudgments) -> tuple[int, int, int]:
    top = set(list(final)[:10])
    seen = set(seen)
    counts = [0, 0, 0]
    for doc in qrels.positives(qid):
        if doc in top:
            counts[0] += 1
        elif doc in seen:
            counts[1] += 1
        else:
            counts[2] += 1
    return counts[0], counts[1], counts[2]


def error_analysis(traces: Iterable, qrels: RelevanceJudgments) -> dict[int, ErrorBreakdown]:
    """Group traces by budget and classify every positive document.

    Accepts :class:`~rgsearch.search.SearchTrace` objects or their dict
    form (as read back from a JSON-lines trace file).
    """
    out: dict[int, ErrorBreakdown] = {}
    for t in traces:
        if isinstance(t, Mapping):
            qid, budget, final, seen = t["qid"], t["budget_k"], t["final"], t["scanned"]
        else:
            qid, budget, seen = t.qid, t.ledger.budget_k, t.seen
            final = t.final.entries if t.final else []
        r, s, n = classify_positives(qid, final, seen, qrels)
        eb = out.setdefault(budget, ErrorBreakdown(budget, 0, 0, 0))
        eb.returned += r
        eb.seen_not_selected += s
        eb.never_seen += n
    return dict(sorted(out.items()))
