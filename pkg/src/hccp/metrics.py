"""Ranking metrics for a pre-ranker scored over each request's retrieved set.

Hit rates measure how much of a request's clicked or purchased items the
pre-ranker keeps in its top K. MAP and NDCG measure agreement with the
ranking oracle's top K, treated as a binary relevant set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import Dataset, RequestLog

HIT_METRICS = ("ISH", "ASH", "ISPH", "ASPH")
CONSISTENCY_METRICS = ("MAP", "NDCG")
N_OCTILES = 8


def _check_k(k: int) -> None:
    if k <= 0:
        raise ValueError(f"cutoff K must be >= 1, got {k}")


def hit_at_k(topk: Sequence[int], relevant, k: int) -> float:
    """|topk[:k] & relevant| / |relevant|."""
    _check_k(k)
    rel = set(int(x) for x in relevant)
    if not rel:
        raise ValueError("hit@K needs a nonempty relevant set")
    return len(rel.intersection(int(x) for x in list(topk)[:k])) / len(rel)


def map_at_k(predicted: Sequence[int], reference, k: int) -> float:
    """Average precision at k with ``reference`` as the binary relevant set.

    Normalised by min(|reference|, k) so a perfect prefix scores 1.
    """
    _check_k(k)
    ref = set(int(x) for x in reference)
    if not ref:
        raise ValueError("MAP@K needs a nonempty reference set")
    hits = 0
    total = 0.0
    for pos, item in enumerate(list(predicted)[:k], start=1):
        if int(item) in ref:
            hits += 1
            total += hits / pos
    return total / min(len(ref), k)


def ndcg_at_k(predicted: Sequence[int], gains: Mapping[int, float], k: int) -> Optional[float]:
    """NDCG@k with log2(position + 1) discount; ``None`` when every gain is 0."""
    _check_k(k)
    ideal = sorted((float(g) for g in gains.values() if g > 0), reverse=True)[:k]
    if not ideal:
        return None
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = sum(float(gains.get(int(item), 0.0)) * disc[i] for i, item in enumerate(list(predicted)[:k]))
    idcg = float(np.dot(ideal, disc[: len(ideal)]))
    return dcg / idcg


# Vectorised kernels used by evaluation; the scalar functions above are the
# readable reference versions and are cross-checked against these in tests.


def hits_in_prefix(rank_of: np.ndarray, relevant: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    """Per-K hit counts given each relevant item's 1-based predicted rank."""
    r = rank_of[relevant]
    return np.array([(r <= k).sum() for k in ks])


def ap_and_ndcg(is_ref: np.ndarray, n_ref: int, k: int) -> tuple:
    """MAP@k and binary NDCG@k from an indicator over the predicted order."""
    top = is_ref[:k].astype(float)
    cum = np.cumsum(top)
    pos = np.arange(1, top.size + 1)
    ap = float(np.sum(top * cum / pos) / min(n_ref, k))
    disc = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = float(np.dot(top, disc[: top.size]))
    idcg = float(disc[: min(n_ref, k)].sum())
    return ap, dcg / idcg


def octile_assignment(frequencies: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Octile (0 = most frequent) of each item among ``items``.

    Items are sorted by frequency descending, ties by ItemId ascending, and
    cut into eight consecutive groups of near-equal size.
    """
    freq = np.asarray(frequencies)
    if np.any(freq < 0):
        raise ValueError("frequencies must be nonnegative")
    items = np.asarray(items, dtype=np.int64)
    order = np.lexsort((items, -freq[items]))
    bucket = np.empty(items.size, dtype=np.int64)
    bucket[order] = np.arange(items.size) * N_OCTILES // max(items.size, 1)
    return bucket


def octile_breakdown(frequencies: np.ndarray, item_values: Mapping[int, float]) -> list:
    """Mean of the per-item values inside each frequency octile (None if empty)."""
    items = np.array(sorted(item_values), dtype=np.int64)
    if items.size == 0:
        return [None] * N_OCTILES
    vals = np.array([item_values[int(i)] for i in items], dtype=float)
    bucket = octile_assignment(frequencies, items)
    return [float(vals[bucket == o].mean()) if np.any(bucket == o) else None for o in range(N_OCTILES)]


@dataclass
class MetricsReport:
    """Mean metric values per cutoff, plus per-item hit tallies for octiles.

    ``values[metric][K]`` is the mean over requests with a nonempty relevant
    set; ``counts[metric]`` is how many requests that was.
    """

    values: dict
    counts: dict
    n_requests: int
    item_hits: dict = field(default_factory=dict)

    def get(self, metric: str, k: int) -> float:
        return self.values[metric][str(k)]

    def item_hit_rates(self, metric: str, k: int) -> dict:
        hits, occ = self.item_hits[f"{metric}@{k}"]
        return {int(i): h / n for i, (h, n) in enumerate(zip(hits, occ)) if n > 0}

    def to_dict(self, with_items: bool = False) -> dict:
        out = {"values": self.values, "counts": self.counts, "n_requests": self.n_requests}
        if with_items:
            out["item_hits"] = {k: [list(map(int, h)), list(map(int, n))] for k, (h, n) in self.item_hits.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        ks = sorted({int(k) for m in self.values.values() for k in m})
        head = "metric  " + "".join(f"{'@' + str(k):>10}" for k in ks)
        lines = [head]
        for metric in (*HIT_METRICS, *CONSISTENCY_METRICS):
            if metric not in self.values:
                continue
            cells = self.values[metric]
            lines.append(f"{metric:<8}" + "".join(
                f"{cells[str(k)]:>10.4f}" if str(k) in cells else f"{'-':>10}" for k in ks))
        return "\n".join(lines)


def relevant_sets(log: RequestLog) -> dict:
    exposed = log.ranked_items[log.exposed]
    return {
        "ISH": exposed[log.click[log.exposed] == 1],
        "ISPH": exposed[log.purchase[log.exposed] == 1],
        "ASH": log.alt_click,
        "ASPH": log.alt_purchase,
    }


def evaluate_scores(dataset: Dataset, score_fn, ks: Sequence[int], consistency_ks: Sequence[int],
                    item_ks: Sequence[int] = ()) -> MetricsReport:
    """Rank each request's retrieved set by ``score_fn(user, items)`` and score it.

    Ties in score break by ItemId. MAP/NDCG use the ranking oracle's top
    min(K, N^r) as the reference set. ``item_ks`` selects the cutoffs for
    which per-item hit tallies are kept.
    """
    for k in (*ks, *consistency_ks):
        _check_k(k)
    ks = sorted(set(int(k) for k in ks))
    cks = sorted(set(int(k) for k in consistency_ks))
    sums = {m: np.zeros(len(ks)) for m in HIT_METRICS}
    counts = {m: 0 for m in (*HIT_METRICS, *CONSISTENCY_METRICS)}
    cons = {m: np.zeros(len(cks)) for m in CONSISTENCY_METRICS}
    n_items = dataset.n_items
    item_hits = {f"{m}@{k}": (np.zeros(n_items, dtype=np.int64), np.zeros(n_items, dtype=np.int64))
                 for m in HIT_METRICS for k in item_ks}
    rank_of = np.zeros(n_items, dtype=np.int64)

    for log in dataset.logs:
        items = log.retrieved
        s = np.asarray(score_fn(log.user, items), dtype=float)
        order = np.lexsort((items, -s))
        ranked = items[order]
        rank_of[ranked] = np.arange(1, ranked.size + 1)
        for m, rel in relevant_sets(log).items():
            if rel.size == 0:
                continue
            counts[m] += 1
            sums[m] += hits_in_prefix(rank_of, rel, ks) / rel.size
            for k in item_ks:
                hits, occ = item_hits[f"{m}@{k}"]
                np.add.at(occ, rel, 1)
                np.add.at(hits, rel, (rank_of[rel] <= k).astype(np.int64))
        if cks:
            by_rank = log.ranked_items[np.argsort(log.ranked_order, kind="stable")]
            counts["MAP"] += 1
            counts["NDCG"] += 1
            for j, k in enumerate(cks):
                ref = by_rank[:k]
                is_ref = np.zeros(n_items, dtype=bool)
                is_ref[ref] = True
                ap, nd = ap_and_ndcg(is_ref[ranked], ref.size, k)
                cons["MAP"][j] += ap
                cons["NDCG"][j] += nd
        rank_of[ranked] = 0

    values = {}
    for m in HIT_METRICS:
        n = counts[m]
        values[m] = {str(k): (float(sums[m][j] / n) if n else None) for j, k in enumerate(ks)}
    for m in CONSISTENCY_METRICS:
        n = counts[m]
        if cks:
            values[m] = {str(k): (float(cons[m][j] / n) if n else None) for j, k in enumerate(cks)}
    return MetricsReport(values, counts, len(dataset.logs), item_hits)
