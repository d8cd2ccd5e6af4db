"""Exact retrieval and ranking metrics.

Retrieval is a brute-force dot product over unit-norm doc embeddings with
ties broken by ascending doc id, so every ranking is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data_org import GroundTruth, Sample
from .encoders import RetrievalModel, query_embed
from .fusion import doc_embed

METRIC_KEYS = ("identical_at_1", "identical_at_5", "relevance_at_1", "map", "mrr")


class EmbeddingIndex:
    def __init__(self, ids: Sequence[int], matrix: np.ndarray, tol: float = 1e-9):
        ids = np.asarray(ids, dtype=np.int64)
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != ids.size:
            raise ValueError(f"index needs one row per id, got {matrix.shape} for {ids.size} ids")
        if len(np.unique(ids)) != ids.size:
            raise ValueError("doc ids are not unique")
        if ids.size and np.abs(np.linalg.norm(matrix, axis=1) - 1.0).max() > tol:
            raise ValueError("index rows must be unit-norm")
        self.ids = ids
        self.matrix = matrix
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self) -> int:
        return self.ids.size

    def rows(self, ids: Sequence[int]) -> np.ndarray:
        return np.array([self._row[int(i)] for i in ids], dtype=np.int64)


def search_topk(q, index: EmbeddingIndex, k: int, candidates: Sequence[int] | None = None) -> list[tuple[int, float]]:
    """Top-``k`` docs by dot product, descending, ties by ascending id.

    ``candidates`` restricts the search to a subset of the index.
    """
    if len(index) == 0:
        raise ValueError("empty index")
    rows = np.arange(len(index)) if candidates is None else index.rows(candidates)
    if not 1 <= k <= rows.size:
        raise ValueError(f"k must lie in [1, {rows.size}], got {k}")
    ids = index.ids[rows]
    scores = index.matrix[rows] @ np.asarray(q, dtype=np.float64)
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


@dataclass
class Judgment:
    identical: set[int]
    relevant: set[int]
    candidates: list[int] | None = None

    def __post_init__(self):
        self.identical = set(self.identical)
        self.relevant = set(self.relevant) | self.identical


def _check(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment]) -> None:
    missing = [q for q in results if q not in judgments]
    if missing:
        raise KeyError(f"queries missing from judgments: {missing[:5]}")


def _hit_at_k(results, judgments, k: int, attr: str) -> float:
    _check(results, judgments)
    if not results:
        return 0.0
    hits = [bool(set(ranked[:k]) & getattr(judgments[q], attr)) for q, ranked in results.items()]
    return float(np.mean(hits))


def identical_at_k(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment], k: int) -> float:
    """Fraction of queries with an identical doc among the first ``k`` results."""
    return _hit_at_k(results, judgments, k, "identical")


def relevance_at_k(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment], k: int) -> float:
    return _hit_at_k(results, judgments, k, "relevant")


def mrr(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment]) -> float:
    """Mean of 1/rank of the first identical doc (0 when none is ranked)."""
    _check(results, judgments)
    if not results:
        return 0.0
    vals = []
    for q, ranked in results.items():
        ident = judgments[q].identical
        vals.append(next((1.0 / (r + 1) for r, d in enumerate(ranked) if d in ident), 0.0))
    return float(np.mean(vals))


def average_precision(ranked: Sequence[int], relevant: set[int], pool: Sequence[int] | None = None) -> float | None:
    """AP over ``ranked``, normalised by the relevant docs present in ``pool`` (``ranked`` if None)."""
    pool = ranked if pool is None else pool
    r_total = len(relevant.intersection(pool))
    if r_total == 0:
        return None
    hits, acc = 0, 0.0
    for r, d in enumerate(ranked, start=1):
        if d in relevant:
            hits += 1
            acc += hits / r
    return acc / r_total


def mean_average_precision(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment]) -> tuple[float, int]:
    """MAP over queries with at least one relevant candidate; also returns how many were excluded."""
    _check(results, judgments)
    aps, excluded = [], 0
    for q, ranked in results.items():
        j = judgments[q]
        ap = average_precision(ranked, j.relevant, j.candidates)
        if ap is None:
            excluded += 1
        else:
            aps.append(ap)
    return (float(np.mean(aps)) if aps else 0.0), excluded


@dataclass
class MetricsReport:
    identical_at_1: float
    identical_at_5: float
    relevance_at_1: float
    map: float
    mrr: float
    map_excluded: int = 0
    per_query: dict[int, list[int]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_KEYS}


def rank_all(q_emb: np.ndarray, q_ids: Sequence[int], index: EmbeddingIndex,
             judgments: Mapping[int, Judgment] | None = None) -> dict[int, list[int]]:
    """Full ranking per query (restricted to the judgment's candidate list when it has one)."""
    out = {}
    for qid, q in zip(q_ids, q_emb):
        cand = judgments[qid].candidates if judgments is not None and qid in judgments else None
        n = len(index) if cand is None else len(cand)
        out[int(qid)] = [d for d, _ in search_topk(q, index, n, cand)]
    return out


def compute_metrics(results: Mapping[int, Sequence[int]], judgments: Mapping[int, Judgment]) -> MetricsReport:
    m, excluded = mean_average_precision(results, judgments)
    return MetricsReport(
        identical_at_1=identical_at_k(results, judgments, 1),
        identical_at_5=identical_at_k(results, judgments, 5),
        relevance_at_1=relevance_at_k(results, judgments, 1),
        map=m,
        mrr=mrr(results, judgments),
        map_excluded=excluded,
        per_query=dict(results),
    )


# ---------------------------------------------------------------------------
# model-driven evaluation
# ---------------------------------------------------------------------------


def embed_samples(model: RetrievalModel, samples: Sequence[Sample], chunk: int = 512) -> np.ndarray:
    """Inference-mode embeddings, one row per sample in input order."""
    out = np.zeros((len(samples), model.cfg.d))
    q = [i for i, s in enumerate(samples) if s.kind == "query"]
    d = [i for i, s in enumerate(samples) if s.kind == "doc"]
    for start in range(0, len(q), chunk):
        part = q[start:start + chunk]
        out[part] = query_embed(model, np.stack([samples[i].raw for i in part])).value
    for start in range(0, len(d), chunk):
        part = d[start:start + chunk]
        out[part] = doc_embed(model, np.stack([samples[i].raw for i in part]),
                              [samples[i].tokens for i in part]).value
    return out


def build_judgments(queries: Sequence[Sample], docs: Sequence[Sample], truth: GroundTruth) -> dict[int, Judgment]:
    """Identical = docs of the same latent product; relevant = docs of the same family."""
    by_product: dict[int, set[int]] = {}
    by_family: dict[int, set[int]] = {}
    for s in docs:
        p = truth.product_of[s.id]
        by_product.setdefault(p, set()).add(s.id)
        by_family.setdefault(truth.family_of[p], set()).add(s.id)
    out = {}
    for q in queries:
        p = truth.product_of[q.id]
        out[q.id] = Judgment(by_product.get(p, set()), by_family.get(truth.family_of[p], set()))
    return out


def evaluate(model: RetrievalModel, queries: Sequence[Sample], docs: Sequence[Sample],
             judgments: Mapping[int, Judgment]) -> MetricsReport:
    index = EmbeddingIndex([s.id for s in docs], embed_samples(model, docs))
    q_emb = embed_samples(model, queries)
    results = rank_all(q_emb, [s.id for s in queries], index, judgments)
    return compute_metrics(results, judgments)
