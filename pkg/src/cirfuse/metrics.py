"""Retrieval metrics: mAP@k, Recall@k, subset recall, and report assembly.

AP@k for a query with ground-truth set G is

    AP@k = (1 / min(k, |G|)) * sum_{i=1..k} rel(i) * (hits up to i) / i

which is the established multi-ground-truth normalization for this
benchmark family.  Query-level values are averaged with ``math.fsum`` in
query-index order, so aggregate values are exact to the last float64 bit
and independent of chunking.

Category-aware reports (fashion-style Shirt/Dress/Toptee splits) average
the per-category means with equal weight, not the pooled per-query mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError
from .search import RankedList

__all__ = [
    "METRIC_NAMES",
    "DEFAULT_K_LISTS",
    "EvalReport",
    "ap_at_k",
    "map_at_k",
    "recall_at_k",
    "recall_subset_at_k",
    "aggregate_report",
]

METRIC_NAMES = ("map", "recall", "recall_subset")

# k grids used by the benchmark protocols this engine reproduces.
DEFAULT_K_LISTS: dict[str, tuple[int, ...]] = {
    "map": (5, 10, 25, 50),
    "recall": (1, 5, 10),
    "recall_subset": (1, 2, 3),
}


def _ranking_indices(ranking: RankedList | Sequence[int] | np.ndarray) -> np.ndarray:
    if isinstance(ranking, RankedList):
        return ranking.indices
    return np.asarray(ranking, dtype=np.int64)


def ap_at_k(ranking: RankedList | Sequence[int], gt_ids: Sequence[int], k: int) -> float:
    """Average precision at cutoff ``k`` for one query."""
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    gt = set(int(g) for g in gt_ids)
    if not gt:
        raise DomainError("gt_ids is empty")
    idx = _ranking_indices(ranking)[:k]
    if idx.size == 0:
        return 0.0
    rel = np.fromiter((1.0 if int(i) in gt else 0.0 for i in idx),
                      dtype=np.float64, count=idx.size)
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, idx.size + 1, dtype=np.float64)
    return float(math.fsum(precision * rel) / min(k, len(gt)))


def _check_counts(rankings: Sequence, annotations: Sequence) -> None:
    if len(rankings) != len(annotations):
        raise DomainError(
            f"{len(rankings)} rankings for {len(annotations)} annotated queries")
    if not rankings:
        raise DomainError("no queries to score")


def per_query_ap(rankings: Sequence[RankedList], annotations: Sequence,
                 k: int) -> np.ndarray:
    _check_counts(rankings, annotations)
    return np.array([ap_at_k(r, a.gt_ids, k) for r, a in zip(rankings, annotations)],
                    dtype=np.float64)


def per_query_hit(rankings: Sequence[RankedList], annotations: Sequence,
                  k: int) -> np.ndarray:
    _check_counts(rankings, annotations)
    out = np.zeros(len(rankings), dtype=np.float64)
    for i, (r, a) in enumerate(zip(rankings, annotations)):
        gt = set(int(g) for g in a.gt_ids)
        if not gt:
            raise DomainError(f"query {i}: gt_ids is empty")
        head = _ranking_indices(r)[:k]
        out[i] = 1.0 if any(int(j) in gt for j in head) else 0.0
    return out


def _mean(values: np.ndarray) -> float:
    return math.fsum(float(v) for v in values) / values.size


def map_at_k(rankings: Sequence[RankedList], annotations: Sequence,
             k_list: Sequence[int]) -> dict[int, float]:
    """mAP@k over the query set for every requested k."""
    return {int(k): _mean(per_query_ap(rankings, annotations, int(k)))
            for k in k_list}


def recall_at_k(rankings: Sequence[RankedList], annotations: Sequence,
                k_list: Sequence[int]) -> dict[int, float]:
    """Fraction of queries with at least one ground truth in the top k."""
    return {int(k): _mean(per_query_hit(rankings, annotations, int(k)))
            for k in k_list}


def recall_subset_at_k(subset_rankings: Sequence[RankedList], annotations: Sequence,
                       k_list: Sequence[int]) -> dict[int, float]:
    """Recall over per-query candidate subsets (rankings from ``rank_subset``)."""
    _check_counts(subset_rankings, annotations)
    for i, a in enumerate(annotations):
        if a.subset_ids is None:
            raise DomainError(f"query {i} has no subset annotation")
    return {int(k): _mean(per_query_hit(subset_rankings, annotations, int(k)))
            for k in k_list}


@dataclass(frozen=True)
class EvalReport:
    """Metric values for one run plus the configuration that produced them.

    ``metrics`` maps metric name -> k -> value over all queries;
    ``categories`` holds the same shape per category and
    ``category_average`` the unweighted mean across categories.
    """

    dataset: str
    query_count: int
    config: dict
    metrics: dict[str, dict[int, float]]
    categories: dict[str, dict[str, dict[int, float]]] | None = None
    category_average: dict[str, dict[int, float]] | None = None

    def value(self, metric: str, k: int) -> float:
        try:
            return self.metrics[metric][int(k)]
        except KeyError:
            raise DomainError(f"report has no value for {metric}@{k}") from None

    def to_json_dict(self) -> dict:
        def fmt(block: Mapping[str, Mapping[int, float]]) -> dict:
            return {m: {str(k): round(float(v), 6) for k, v in ks.items()}
                    for m, ks in block.items()}

        doc: dict = {
            "dataset": self.dataset,
            "query_count": self.query_count,
            "config": self.config,
            "metrics": fmt(self.metrics),
        }
        if self.categories is not None:
            doc["categories"] = {name: fmt(block)
                                 for name, block in self.categories.items()}
        if self.category_average is not None:
            doc["category_average"] = fmt(self.category_average)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


def aggregate_report(per_query_values: Mapping[str, Mapping[int, np.ndarray]],
                     query_count: int,
                     dataset: str = "",
                     config: dict | None = None,
                     categories: Sequence | None = None) -> EvalReport:
    """Assemble an :class:`EvalReport` from per-query metric values.

    ``per_query_values`` maps metric name -> k -> per-query float array.
    ``categories`` is an optional sequence of objects with ``name``,
    ``start``, ``end`` (half-open query ranges); ranges must not overlap.
    """
    for metric, ks in per_query_values.items():
        for k, vals in ks.items():
            if len(vals) != query_count:
                raise DomainError(
                    f"{metric}@{k}: {len(vals)} values for {query_count} queries")

    overall = {m: {int(k): _mean(np.asarray(v, dtype=np.float64))
                   for k, v in ks.items()}
               for m, ks in per_query_values.items()}

    cat_block = None
    cat_avg = None
    if categories:
        spans = sorted(((int(c.start), int(c.end), str(c.name)) for c in categories))
        for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
            if e1 > s2:
                raise DomainError(f"category ranges overlap: {n1} and {n2}")
        names = [str(c.name) for c in categories]
        if len(set(names)) != len(names):
            raise DomainError("duplicate category names")
        cat_block = {}
        for c in categories:
            s, e = int(c.start), int(c.end)
            if not (0 <= s < e <= query_count):
                raise DomainError(
                    f"category {c.name}: range [{s}, {e}) outside [0, {query_count})")
            cat_block[str(c.name)] = {
                m: {int(k): _mean(np.asarray(v[s:e], dtype=np.float64))
                    for k, v in ks.items()}
                for m, ks in per_query_values.items()}
        cat_avg = {m: {int(k): math.fsum(cat_block[n][m][int(k)] for n in names) / len(names)
                       for k in ks}
                   for m, ks in per_query_values.items()}

    return EvalReport(dataset=dataset, query_count=query_count,
                      config=dict(config or {}), metrics=overall,
                      categories=cat_block, category_average=cat_avg)
