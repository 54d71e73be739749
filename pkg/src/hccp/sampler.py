"""Hybrid multi-level sample construction.

Per request the sampler emits impressions (N1), the unexposed part of the
arranged ranking sequence (N2), pre-ranking tail items (N3) and pool
negatives (N5). List-wise in-batch negatives (N4) need the whole batch and
are added by :func:`add_inbatch_negatives` once requests are assembled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .domain import UNKNOWN, RequestLog, SampledInstance, SampleRole

DEFAULT_CHUNK_RATES = (0.5, 0.125, 0.1, 0.05, 0.025, 0.01, 0.005)
NO_ORDER = np.iinfo(np.int64).min


@dataclass(frozen=True)
class ChunkSpec:
    """Non-uniform sampling chunks over ranking positions.

    ``boundaries[i]`` is the inclusive upper ranking order of chunk ``i``;
    positions beyond the last boundary use the last rate.
    """

    boundaries: tuple
    rates: tuple

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        object.__setattr__(self, "rates", tuple(float(s) for s in self.rates))
        if len(self.boundaries) != len(self.rates) or not self.rates:
            raise ValueError("need one rate per chunk boundary")
        if any(b1 >= b2 for b1, b2 in zip(self.boundaries, self.boundaries[1:])) or self.boundaries[0] < 1:
            raise ValueError(f"chunk boundaries must be strictly increasing and >= 1: {self.boundaries}")
        if any(not 0.0 <= s <= 1.0 for s in self.rates):
            raise ValueError(f"chunk rates must lie in [0, 1]: {self.rates}")

    @classmethod
    def equal_width(cls, n_rank: int, rates: Sequence[float] = DEFAULT_CHUNK_RATES) -> "ChunkSpec":
        m = len(rates)
        bounds = np.ceil(np.arange(1, m + 1) * n_rank / m).astype(int)
        return cls(tuple(bounds), tuple(rates))

    @classmethod
    def threshold(cls, n_rank: int, threshold: int, head_rate: float, tail_rate: float) -> "ChunkSpec":
        """Two chunks split at a fixed ranking order (e.g. a hit-rate crossing point)."""
        return cls((threshold, n_rank), (head_rate, tail_rate))

    def rate_for(self, order: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.boundaries), np.asarray(order), side="left")
        return np.asarray(self.rates)[np.minimum(idx, len(self.rates) - 1)]


@dataclass(frozen=True)
class SamplerConfig:
    chunk_rates: tuple = DEFAULT_CHUNK_RATES
    chunk_boundaries: Optional[tuple] = None
    prerank_tail_rate: Optional[float] = None
    target_prerank_size: float = 15.0
    inbatch_rate: float = 0.05
    pool_negatives: int = 10

    def __post_init__(self):
        for name in ("prerank_tail_rate", "inbatch_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.pool_negatives < 0 or self.target_prerank_size < 0:
            raise ValueError("counts must be >= 0")

    def chunk_spec(self, n_rank: int) -> ChunkSpec:
        if self.chunk_boundaries is None:
            return ChunkSpec.equal_width(n_rank, self.chunk_rates)
        return ChunkSpec(self.chunk_boundaries, self.chunk_rates)

    def tail_rate(self, n_tail: int) -> float:
        if self.prerank_tail_rate is not None:
            return self.prerank_tail_rate
        return min(1.0, self.target_prerank_size / n_tail) if n_tail else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RankedSeq:
    """Columnar slice of a ranking sequence (parallel arrays)."""

    items: np.ndarray
    r: np.ndarray
    e: np.ndarray
    click: np.ndarray
    purchase: np.ndarray
    order: Optional[np.ndarray] = None  # arranged order r^c or r^t, once computed

    @classmethod
    def from_log(cls, log: RequestLog) -> "RankedSeq":
        seq = cls(log.ranked_items, log.ranked_order, log.exposed, log.click, log.purchase)
        if np.all(log.ranked_order[1:] > log.ranked_order[:-1]):
            return seq
        return seq.take(np.argsort(log.ranked_order, kind="stable"))

    def take(self, idx) -> "RankedSeq":
        return RankedSeq(
            self.items[idx], self.r[idx], self.e[idx], self.click[idx], self.purchase[idx],
            None if self.order is None else self.order[idx],
        )

    def __len__(self) -> int:
        return len(self.items)

    def labels(self, task: str) -> np.ndarray:
        return self.click if task == "click" else self.purchase


def chunk_sample_ranking(ranked: RankedSeq, spec: ChunkSpec, rng: np.random.Generator) -> RankedSeq:
    """Keep each item with its chunk's rate; impressions are always kept."""
    if len(ranked) == 0:
        return ranked
    keep = rng.random(len(ranked)) < spec.rate_for(ranked.r)
    keep |= ranked.e
    return ranked.take(np.flatnonzero(keep))


def _arranged(seq: RankedSeq, offset_labels: np.ndarray, n_rank: int) -> RankedSeq:
    known = np.where(offset_labels == UNKNOWN, 0, offset_labels).astype(np.int64)
    order = seq.r - (seq.e.astype(np.int64) + known) * n_rank
    idx = np.lexsort((seq.items, order))
    out = seq.take(idx)
    return replace(out, order=order[idx])


def arrange_global(sampled: RankedSeq, n_rank: int) -> RankedSeq:
    """Sort by r^c = r - (e + click) * N^r; unknown click counts as 0."""
    return _arranged(sampled, sampled.click, n_rank)


def arrange_local(arranged: RankedSeq, task: str, n_rank: int) -> RankedSeq:
    """Exposed items sorted by r^t = r - (e + l^t) * N^r."""
    exposed = arranged.take(np.flatnonzero(arranged.e))
    return _arranged(exposed, exposed.labels(task), n_rank)


def sample_prerank_tail(log: RequestLog, rate: float, rng: np.random.Generator) -> np.ndarray:
    tail = log.prerank_tail()
    if rate <= 0.0 or tail.size == 0:
        return tail[:0]
    return tail[rng.random(tail.size) < rate]


def sample_pool(n_items: int, retrieved: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct items uniformly from the catalog minus ``retrieved``."""
    retrieved = np.asarray(retrieved)
    available = n_items - retrieved.size
    if k > available:
        raise ValueError(f"cannot draw {k} pool negatives: only {available} of {n_items} catalog items unretrieved")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if available < 4 * k:
        return rng.choice(np.setdiff1d(np.arange(n_items), retrieved), size=k, replace=False)
    # Sequential rejection sampling: keeping the first k distinct accepted
    # draws is uniform over k-subsets of the complement.
    taken = np.zeros(n_items, dtype=bool)
    taken[retrieved] = True
    chosen = np.empty(0, dtype=np.int64)
    while chosen.size < k:
        cand = rng.integers(0, n_items, size=4 * k)
        cand = np.concatenate([chosen, cand[~taken[cand]]])
        _, first = np.unique(cand, return_index=True)
        chosen = cand[np.sort(first)]
    return chosen[:k]


@dataclass(frozen=True, eq=False)
class ListwiseBatch:
    """Instances of several requests, contiguous per request.

    Order columns hold ``NO_ORDER`` where undefined; label columns use
    ``UNKNOWN``. ``cross`` is the synthetic cross-feature score (0 for N4/N5).
    """

    req: np.ndarray
    user: np.ndarray
    item: np.ndarray
    role: np.ndarray
    e: np.ndarray
    click: np.ndarray
    purchase: np.ndarray
    r: np.ndarray
    r_c: np.ndarray
    r_click: np.ndarray
    r_purchase: np.ndarray
    cross: np.ndarray
    n_requests: int
    request_users: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.item)

    def role_mask(self, *roles: SampleRole) -> np.ndarray:
        return np.isin(self.role, [int(r) for r in roles])

    def labels(self, task: str) -> np.ndarray:
        return self.click if task == "click" else self.purchase

    def local_order(self, task: str) -> np.ndarray:
        return self.r_click if task == "click" else self.r_purchase

    def role_onehot(self) -> np.ndarray:
        return (self.role[:, None] == np.arange(1, 6)[None, :]).astype(np.int8)

    def counts(self) -> np.ndarray:
        """(n_requests, 5) instance counts per role."""
        out = np.zeros((self.n_requests, 5), dtype=np.int64)
        np.add.at(out, (self.req, self.role - 1), 1)
        return out

    def select(self, idx) -> "ListwiseBatch":
        cols = {name: getattr(self, name)[idx] for name in _COLUMNS}
        return ListwiseBatch(**cols, n_requests=self.n_requests, request_users=self.request_users)

    def instances(self):
        for i in range(len(self)):
            role = SampleRole(int(self.role[i]))
            e = bool(self.e[i])
            r_t = {"click": int(self.r_click[i]), "purchase": int(self.r_purchase[i])} if e else None
            yield int(self.req[i]), SampledInstance(
                user=int(self.user[i]), item=int(self.item[i]), role=role, e=e,
                click=int(self.click[i]), purchase=int(self.purchase[i]),
                r=None if self.r[i] == NO_ORDER else int(self.r[i]),
                r_c=None if self.r_c[i] == NO_ORDER else int(self.r_c[i]),
                r_t=r_t,
            )


_COLUMNS = ("req", "user", "item", "role", "e", "click", "purchase", "r", "r_c", "r_click", "r_purchase", "cross")


@dataclass(frozen=True)
class RequestSamples:
    """Per-request sampler output: arranged R^c (N1 then N2), B^p and B^c."""

    user: int
    arranged: RankedSeq
    prerank_tail: np.ndarray
    pool: np.ndarray


def sample_request(log: RequestLog, config: SamplerConfig, n_items: int,
                   rng: np.random.Generator) -> RequestSamples:
    n_rank = log.n_ranked
    seq = RankedSeq.from_log(log)
    arranged = arrange_global(chunk_sample_ranking(seq, config.chunk_spec(n_rank), rng), n_rank)
    tail = sample_prerank_tail(log, config.tail_rate(log.n_retrieved - n_rank), rng)
    pool = sample_pool(n_items, log.retrieved, config.pool_negatives, rng)
    return RequestSamples(log.user, arranged, tail, pool)


def assemble_batch(samples: Sequence[RequestSamples], n_rank: Sequence[int]) -> ListwiseBatch:
    """Flatten per-request samples into batch columns, grouped by request.

    R^c sorts every exposed item before every unexposed one, so its head
    forms the N1 rows and its remainder the N2 rows.
    """
    items, roles, r, r_c, click, purchase, reqs, ranks = [], [], [], [], [], [], [], []
    for b, s in enumerate(samples):
        a = s.arranged
        n_exp = int(a.e.sum())
        n_seq, n_tail, n_pool = len(a), len(s.prerank_tail), len(s.pool)
        n_extra = n_tail + n_pool
        items += [a.items, s.prerank_tail, s.pool]
        roles.append(np.repeat([1, 2, 3, 5], [n_exp, n_seq - n_exp, n_tail, n_pool]))
        r += [a.r, np.full(n_extra, NO_ORDER)]
        r_c += [a.order, np.full(n_extra, NO_ORDER)]
        click += [a.click, np.full(n_extra, UNKNOWN)]
        purchase += [a.purchase, np.full(n_extra, UNKNOWN)]
        reqs.append(np.full(n_seq + n_extra, b))
        ranks.append(np.full(n_seq + n_extra, n_rank[b]))
    req = np.concatenate(reqs).astype(np.int64)
    role = np.concatenate(roles).astype(np.int64)
    e = role == int(SampleRole.N1_IMPRESSION)
    r = np.concatenate(r).astype(np.int64)
    click = np.concatenate(click).astype(np.int8)
    purchase = np.concatenate(purchase).astype(np.int8)
    nr = np.concatenate(ranks).astype(np.int64)
    r_click = np.where(e, r - (1 + click.astype(np.int64)) * nr, NO_ORDER)
    r_purchase = np.where(e, r - (1 + purchase.astype(np.int64)) * nr, NO_ORDER)
    users = np.array([s.user for s in samples], dtype=np.int64)
    return ListwiseBatch(
        req=req, user=users[req], item=np.concatenate(items).astype(np.int64), role=role, e=e,
        click=click, purchase=purchase, r=r, r_c=np.concatenate(r_c).astype(np.int64),
        r_click=r_click, r_purchase=r_purchase, cross=np.zeros(len(req)),
        n_requests=len(samples), request_users=users,
    )


def build_listwise_batch(logs: Sequence[RequestLog], config: SamplerConfig, rng: np.random.Generator,
                         n_items: int, cross_fn: Optional[Callable] = None) -> ListwiseBatch:
    """Assemble N1/N2/N3/N5 rows for each request, grouped by request.

    ``cross_fn(users, items)`` supplies the synthetic cross-feature score for
    N1-N3 rows; without it the column is zero.
    """
    if not logs:
        raise ValueError("need at least one request log")
    samples = [sample_request(log, config, n_items, rng) for log in logs]
    batch = assemble_batch(samples, [log.n_ranked for log in logs])
    if cross_fn is not None:
        has_cross = batch.role_mask(SampleRole.N1_IMPRESSION, SampleRole.N2_RANKING_SEQ,
                                    SampleRole.N3_PRERANK_TAIL)
        cross = np.zeros(len(batch))
        cross[has_cross] = cross_fn(batch.user[has_cross], batch.item[has_cross])
        batch = replace(batch, cross=cross)
    return batch


def sample_inbatch(batch: ListwiseBatch, rate: float, rng: np.random.Generator) -> list[np.ndarray]:
    """List-wise in-batch negatives for every request of ``batch``.

    Candidates for request ``b`` are the impressions (R^t) of all other
    requests, i.e. the columns of the |U| x |U|*|R^t| user-item score
    matrix. Items in ``b``'s own R^t, B^r or B^p are masked, and each
    surviving (user, item) pair is kept with probability ``rate``.
    """
    n = batch.n_requests
    if n < 2 or rate <= 0.0:
        return [np.empty(0, dtype=np.int64) for _ in range(n)]
    imp = batch.role_mask(SampleRole.N1_IMPRESSION)
    cand_items = batch.item[imp]
    cand_req = batch.req[imp]
    own_rows = batch.role_mask(SampleRole.N1_IMPRESSION, SampleRole.N2_RANKING_SEQ, SampleRole.N3_PRERANK_TAIL)
    # own[b, c]: candidate c's item belongs to request b's own sets.
    stride = int(max(cand_items.max(), batch.item.max())) + 1
    own_keys = batch.req[own_rows] * stride + batch.item[own_rows]
    pair_keys = np.arange(n)[:, None] * stride + cand_items[None, :]
    own = np.isin(pair_keys, own_keys)
    allowed = (cand_req[None, :] != np.arange(n)[:, None]) & ~own
    keep = allowed & (rng.random(allowed.shape) < rate)
    return [cand_items[keep[b]] for b in range(n)]


def add_inbatch_negatives(batch: ListwiseBatch, rate: float, rng: np.random.Generator) -> ListwiseBatch:
    negs = sample_inbatch(batch, rate, rng)
    n_neg = np.array([len(x) for x in negs])
    if not n_neg.sum():
        return batch
    k = int(n_neg.sum())
    req = np.repeat(np.arange(batch.n_requests), n_neg)
    extra = dict(
        req=req, user=batch.request_users[req], item=np.concatenate(negs).astype(np.int64),
        role=np.full(k, int(SampleRole.N4_INBATCH)), e=np.zeros(k, dtype=bool),
        click=np.full(k, UNKNOWN, dtype=np.int8), purchase=np.full(k, UNKNOWN, dtype=np.int8),
        r=np.full(k, NO_ORDER), r_c=np.full(k, NO_ORDER), r_click=np.full(k, NO_ORDER),
        r_purchase=np.full(k, NO_ORDER), cross=np.zeros(k),
    )
    cols = {name: np.concatenate([getattr(batch, name), extra[name]]) for name in _COLUMNS}
    merged = ListwiseBatch(**cols, n_requests=batch.n_requests, request_users=batch.request_users)
    # Stable sort keeps request grouping and the within-request row order.
    return merged.select(np.lexsort((merged.role, merged.req)))
