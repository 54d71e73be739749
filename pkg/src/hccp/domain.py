"""Core cascade-log types and the line-delimited JSON log format.

A log file holds one JSON object per line, one line per request::

    {"user": 3, "n_items": 20000, "n_users": 2000,
     "retrieved": [812, 44, ...],
     "ranked": [[44, 1, 1, 1, 0], [812, 2, 0, null, null], ...],
     "exposed_count": 10,
     "alt_click": [44], "alt_purchase": []}

``retrieved`` lists item ids in pre-ranking order (pre-rank order is the
1-based position). Each ``ranked`` entry is ``[item, r, e, click, purchase]``
with ``r`` the 1-based ranking order, ``e`` the exposure flag and labels in
``{0, 1, null}``; ``null`` marks feedback that does not exist because the item
was never shown. ``alt_click`` / ``alt_purchase`` carry feedback from an
independent second exposure pass over the same retrieved set and back the
all-scenario hit metrics.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

UNKNOWN = -1
TASKS = ("click", "purchase")


class LogFormatError(ValueError):
    """A log line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {reason}")


class ValidationError(ValueError):
    """A request violates one of the RequestLog invariants."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        msg = f"invariant '{invariant}' violated"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class SampleRole(enum.IntEnum):
    N1_IMPRESSION = 1
    N2_RANKING_SEQ = 2
    N3_PRERANK_TAIL = 3
    N4_INBATCH = 4
    N5_POOL = 5

    @property
    def is_hard_negative(self) -> bool:
        return self in (SampleRole.N2_RANKING_SEQ, SampleRole.N3_PRERANK_TAIL)

    @property
    def is_easy_negative(self) -> bool:
        return self in (SampleRole.N4_INBATCH, SampleRole.N5_POOL)


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class RequestLog:
    """Full cascade trace of a single request.

    ``ranked_*`` arrays are parallel. Labels use ``UNKNOWN`` (-1) for
    unexposed items, never 0.
    """

    user: int
    retrieved: np.ndarray
    ranked_items: np.ndarray
    ranked_order: np.ndarray
    exposed: np.ndarray
    click: np.ndarray
    purchase: np.ndarray
    alt_click: np.ndarray = field(default_factory=lambda: _frozen([], np.int64))
    alt_purchase: np.ndarray = field(default_factory=lambda: _frozen([], np.int64))

    def __post_init__(self):
        setter = object.__setattr__
        setter(self, "user", int(self.user))
        setter(self, "retrieved", _frozen(self.retrieved, np.int64))
        setter(self, "ranked_items", _frozen(self.ranked_items, np.int64))
        setter(self, "ranked_order", _frozen(self.ranked_order, np.int64))
        setter(self, "exposed", _frozen(self.exposed, bool))
        setter(self, "click", _frozen(self.click, np.int8))
        setter(self, "purchase", _frozen(self.purchase, np.int8))
        setter(self, "alt_click", _frozen(self.alt_click, np.int64))
        setter(self, "alt_purchase", _frozen(self.alt_purchase, np.int64))

    @property
    def n_retrieved(self) -> int:
        return len(self.retrieved)

    @property
    def n_ranked(self) -> int:
        return len(self.ranked_items)

    @property
    def exposed_count(self) -> int:
        return int(self.exposed.sum())

    def labels(self, task: str) -> np.ndarray:
        if task == "click":
            return self.click
        if task == "purchase":
            return self.purchase
        raise KeyError(task)

    def prerank_tail(self) -> np.ndarray:
        """Retrieved items that pre-ranking did not forward downstream."""
        return self.retrieved[self.n_ranked:]

    def by_rank(self) -> "RequestLog":
        """Copy with the ranked arrays sorted by ranking order ascending."""
        idx = np.argsort(self.ranked_order, kind="stable")
        return RequestLog(
            self.user, self.retrieved, self.ranked_items[idx], self.ranked_order[idx],
            self.exposed[idx], self.click[idx], self.purchase[idx],
            self.alt_click, self.alt_purchase,
        )

    def __eq__(self, other):
        if not isinstance(other, RequestLog):
            return NotImplemented
        if self.user != other.user:
            return False
        names = ("retrieved", "ranked_items", "ranked_order", "exposed", "click",
                 "purchase", "alt_click", "alt_purchase")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)

    __hash__ = None


def validate_request(log: RequestLog, n_items: int, n_users: int, declared_exposed: Optional[int] = None) -> None:
    """Raise ValidationError naming the first broken invariant."""
    if not 0 <= log.user < n_users:
        raise ValidationError("user_id_range", f"user {log.user} outside [0, {n_users})")
    for name in ("retrieved", "ranked_items", "alt_click", "alt_purchase"):
        ids = getattr(log, name)
        if ids.size and (ids.min() < 0 or ids.max() >= n_items):
            bad = ids[(ids < 0) | (ids >= n_items)][0]
            raise ValidationError("item_id_range", f"{name} holds item {bad} outside [0, {n_items})")
    if len(np.unique(log.retrieved)) != log.n_retrieved:
        raise ValidationError("retrieved_distinct", "duplicate item in retrieved sequence")
    n = log.n_ranked
    arrays = (log.ranked_order, log.exposed, log.click, log.purchase)
    if any(len(a) != n for a in arrays):
        raise ValidationError("ranked_shape", "ranked columns differ in length")
    if not np.array_equal(np.sort(log.ranked_order), np.arange(1, n + 1)):
        raise ValidationError("rank_permutation", f"ranking orders are not a permutation of 1..{n}")
    if not np.isin(log.ranked_items, log.retrieved).all():
        raise ValidationError("ranked_subset_of_retrieved", "ranked item missing from retrieved set")
    if declared_exposed is not None and declared_exposed != log.exposed_count:
        raise ValidationError(
            "exposed_count", f"declared {declared_exposed}, found {log.exposed_count} exposed items"
        )
    for task in TASKS:
        lab = log.labels(task)
        if np.any(lab[~log.exposed] != UNKNOWN):
            raise ValidationError("unexposed_labels_unknown", f"unexposed item carries a {task} label")
        if np.any(~np.isin(lab[log.exposed], (0, 1))):
            raise ValidationError("exposed_labels_known", f"exposed item lacks a {task} label")
    if np.any((log.purchase == 1) & (log.click != 1)):
        raise ValidationError("purchase_implies_click", "purchase recorded without click")
    if not np.isin(log.alt_purchase, log.alt_click).all():
        raise ValidationError("purchase_implies_click", "alternative purchase without alternative click")


@dataclass(frozen=True, eq=False)
class Dataset:
    logs: tuple
    n_items: int
    n_users: int

    def __post_init__(self):
        object.__setattr__(self, "logs", tuple(self.logs))

    def __len__(self) -> int:
        return len(self.logs)

    def __iter__(self) -> Iterator[RequestLog]:
        return iter(self.logs)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_items, self.n_users) == (other.n_items, other.n_users) and self.logs == other.logs

    __hash__ = None

    @cached_property
    def frequencies(self) -> np.ndarray:
        """Impression count per item over the whole collection."""
        counts = np.zeros(self.n_items, dtype=np.int64)
        for log in self.logs:
            np.add.at(counts, log.ranked_items[log.exposed], 1)
        counts.setflags(write=False)
        return counts

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.n_items}:{self.n_users}:{len(self.logs)}".encode())
        for log in self.logs:
            h.update(np.int64(log.user).tobytes())
            for a in (log.retrieved, log.ranked_items, log.ranked_order, log.exposed,
                      log.click, log.purchase, log.alt_click, log.alt_purchase):
                h.update(np.int64(a.size).tobytes())
                h.update(a.tobytes())
        return h.hexdigest()

    def filter(self, predicate) -> "Dataset":
        return Dataset(tuple(log for log in self.logs if predicate(log)), self.n_items, self.n_users)


def _label_json(v: int):
    return None if v == UNKNOWN else int(v)


def _label_value(v) -> int:
    if v is None:
        return UNKNOWN
    if isinstance(v, bool) or v not in (0, 1):
        raise ValueError(f"label must be 0, 1 or null, got {v!r}")
    return int(v)


def encode_request(log: RequestLog, n_items: int, n_users: int) -> str:
    ranked = [
        [int(j), int(r), int(e), _label_json(c), _label_json(p)]
        for j, r, e, c, p in zip(log.ranked_items, log.ranked_order, log.exposed, log.click, log.purchase)
    ]
    record = {
        "user": log.user,
        "n_items": n_items,
        "n_users": n_users,
        "retrieved": log.retrieved.tolist(),
        "ranked": ranked,
        "exposed_count": log.exposed_count,
        "alt_click": log.alt_click.tolist(),
        "alt_purchase": log.alt_purchase.tolist(),
    }
    return json.dumps(record, separators=(",", ":"))


def decode_request(line: str) -> tuple[RequestLog, int, int, int]:
    """Parse one line; returns (log, n_items, n_users, declared exposed count)."""
    rec = json.loads(line)
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    ranked = rec["ranked"]
    if any(not isinstance(row, list) or len(row) != 5 for row in ranked):
        raise ValueError("ranked entries must be [item, r, e, click, purchase]")
    cols = list(zip(*ranked)) if ranked else [(), (), (), (), ()]
    if any(e not in (0, 1) for e in cols[2]):
        raise ValueError("exposure flag must be 0 or 1")
    log = RequestLog(
        user=rec["user"],
        retrieved=rec["retrieved"],
        ranked_items=cols[0],
        ranked_order=cols[1],
        exposed=[bool(e) for e in cols[2]],
        click=[_label_value(v) for v in cols[3]],
        purchase=[_label_value(v) for v in cols[4]],
        alt_click=rec.get("alt_click", []),
        alt_purchase=rec.get("alt_purchase", []),
    )
    return log, int(rec["n_items"]), int(rec["n_users"]), int(rec["exposed_count"])


def write_logs(dataset: Dataset, path) -> None:
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for log in dataset.logs:
                fh.write(encode_request(log, dataset.n_items, dataset.n_users))
                fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write logs to {path}: {exc}") from exc


def iter_logs(path) -> Iterable[tuple[RequestLog, int, int]]:
    """Stream validated requests from a log file."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                # The writer always terminates lines; a missing newline means truncation.
                try:
                    json.loads(line)
                except json.JSONDecodeError as exc:
                    raise LogFormatError(path, line_no, f"truncated record ({exc.msg})") from None
            try:
                log, n_items, n_users, declared = decode_request(line)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise LogFormatError(path, line_no, f"malformed record: {exc}") from None
            try:
                validate_request(log, n_items, n_users, declared)
            except ValidationError as exc:
                raise ValidationError(exc.invariant, f"{path}:{line_no}: {exc}") from None
            yield log, n_items, n_users


def read_logs(path) -> Dataset:
    logs = []
    sizes = None
    for log, n_items, n_users in iter_logs(path):
        if sizes is None:
            sizes = (n_items, n_users)
        elif sizes != (n_items, n_users):
            raise ValidationError("catalog_consistent", f"{path}: catalog size changes mid-file")
        logs.append(log)
    n_items, n_users = sizes or (0, 0)
    return Dataset(tuple(logs), n_items, n_users)


def make_dataset(logs: Sequence[RequestLog], n_items: int, n_users: int, validate: bool = True) -> Dataset:
    if validate:
        for log in logs:
            validate_request(log, n_items, n_users)
    return Dataset(tuple(logs), n_items, n_users)


@dataclass(frozen=True)
class SampledInstance:
    """One training item with its sample role and arranged orders.

    ``r_c`` exists only for N1/N2 items; ``r_t`` (keyed by task) only for
    exposed items.
    """

    user: int
    item: int
    role: SampleRole
    e: bool
    click: int = UNKNOWN
    purchase: int = UNKNOWN
    r: Optional[int] = None
    r_c: Optional[int] = None
    r_t: Optional[dict] = None

    def __post_init__(self):
        has_rc = self.role in (SampleRole.N1_IMPRESSION, SampleRole.N2_RANKING_SEQ)
        if (self.r_c is not None) != has_rc:
            raise ValidationError("r_c_iff_ranking_sequence", f"role {self.role.name}")
        if (self.r_t is not None) != bool(self.e):
            raise ValidationError("r_t_iff_exposed", f"role {self.role.name}, e={self.e}")
        if not self.e and (self.click != UNKNOWN or self.purchase != UNKNOWN):
            raise ValidationError("unexposed_labels_unknown")

    def to_json(self) -> dict:
        return {
            "user": self.user, "item": self.item, "role": self.role.name, "e": int(self.e),
            "click": _label_json(self.click), "purchase": _label_json(self.purchase),
            "r": self.r, "r_c": self.r_c, "r_t": self.r_t,
        }
