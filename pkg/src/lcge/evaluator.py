"""Entity ranking, MRR and Hits@n.

Candidates are ranked by ``e1 + lam * e2``.  Interval queries average the
scores at the two endpoints.  Ties count half: ``rank = 1 + #greater + #ties/2``.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Tkg
from .scoring import Params, object_scores, subject_scores

OBJECT = "object"
SUBJECT = "subject"
RAW = "raw"
TIME = "time"
FILTERS = (RAW, TIME)


@dataclass(frozen=True)
class Query:
    """One missing entity.  ``anchor`` is the known entity (s for object queries)."""

    direction: str
    anchor: int
    p: int
    t_start: int
    truth: int
    t_end: int | None = None

    def __post_init__(self):
        if self.direction not in (OBJECT, SUBJECT):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.t_end is None:
            object.__setattr__(self, "t_end", self.t_start)

    @property
    def times(self) -> tuple[int, ...]:
        return (self.t_start,) if self.t_start == self.t_end else (self.t_start, self.t_end)


@dataclass
class EvalReport:
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n: int
    ranks: np.ndarray = field(repr=False)
    filter: str = TIME
    direction: str = "both"

    def summary(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits3": self.hits3,
            "hits10": self.hits10,
            "n": self.n,
            "filter": self.filter,
            "direction": self.direction,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [("filter", self.filter), ("direction", self.direction), ("n", str(self.n))]
        rows += [(k, f"{getattr(self, k):.4f}") for k in ("mrr", "hits1", "hits3", "hits10")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>10}" for k, v in rows) + "\n"

    def write(self, directory: str | Path, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        js, txt = directory / f"{stem}.json", directory / f"{stem}.txt"
        js.write_text(self.to_json() + "\n", encoding="utf-8")
        txt.write_text(self.to_text(), encoding="utf-8")
        return js, txt


def metrics_from_ranks(ranks: Sequence[float]) -> tuple[float, float, float, float]:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no ranks")
    return (
        float(np.mean(1.0 / r)),
        float(np.mean(r <= 1)),
        float(np.mean(r <= 3)),
        float(np.mean(r <= 10)),
    )


def rank_of(scores: np.ndarray, truth: int, exclude: Iterable[int] = ()) -> float:
    """Expected rank of ``truth`` among ``scores`` with ``exclude`` removed."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.ones(len(scores), dtype=bool)
    ex = [e for e in exclude if e != truth]
    if ex:
        mask[ex] = False
    target = scores[truth]
    kept = scores[mask]
    greater = int(np.sum(kept > target))
    ties = int(np.sum(kept == target)) - 1
    return 1.0 + greater + ties / 2.0


class KnownFacts:
    """Same-timestamp positives used by the time-aware filter."""

    def __init__(self, graphs: Iterable[Tkg]):
        self.objects = defaultdict(set)
        self.subjects = defaultdict(set)
        for g in graphs:
            for s, p, o, t in g.events:
                self.objects[s, p, t].add(o)
                self.subjects[o, p, t].add(s)

    def positives(self, q: Query) -> set[int]:
        table = self.objects if q.direction == OBJECT else self.subjects
        out = set()
        for t in q.times:
            out |= table.get((q.anchor, q.p, t), set())
        return out


def _scores(params: Params, queries: Sequence[Query], lam: float) -> np.ndarray:
    """Score matrix (len(queries), |E|) for queries sharing one direction."""
    anchor = np.array([q.anchor for q in queries])
    p = np.array([q.p for q in queries])
    ts = np.array([q.t_start for q in queries])
    te = np.array([q.t_end for q in queries])
    fn = object_scores if queries[0].direction == OBJECT else subject_scores
    out = fn(params, anchor, p, ts, lam) if queries[0].direction == OBJECT else fn(params, p, anchor, ts, lam)
    interval = ts != te
    if interval.any():
        idx = np.nonzero(interval)[0]
        if queries[0].direction == OBJECT:
            other = fn(params, anchor[idx], p[idx], te[idx], lam)
        else:
            other = fn(params, p[idx], anchor[idx], te[idx], lam)
        out[idx] = (out[idx] + other) / 2.0
    return out


def score_interval_query(params: Params, q: Query, lam: float = 1.0) -> np.ndarray:
    """Per-candidate scores, averaged over the query's interval endpoints."""
    return _scores(params, [q], lam)[0]


def rank_query(params: Params, q: Query, known: KnownFacts | None = None, lam: float = 1.0, filter: str = TIME) -> float:
    if filter not in FILTERS:
        raise ValueError(f"unknown filter {filter!r}")
    scores = score_interval_query(params, q, lam)
    exclude = known.positives(q) if (filter == TIME and known is not None) else ()
    return rank_of(scores, q.truth, exclude)


def queries_from_events(events: Iterable, direction: str = "both") -> list[Query]:
    """Object- and/or subject-missing queries for (s, p, o, t[, t_end]) rows."""
    out = []
    for row in events:
        s, p, o, t = (int(x) for x in row[:4])
        te = int(row[4]) if len(row) > 4 else t
        if direction in ("both", OBJECT):
            out.append(Query(OBJECT, s, p, t, o, te))
        if direction in ("both", SUBJECT):
            out.append(Query(SUBJECT, o, p, t, s, te))
    return out


def rank_all(
    params: Params,
    queries: Sequence[Query],
    known: KnownFacts | None = None,
    lam: float = 1.0,
    filter: str = TIME,
    batch_size: int = 512,
) -> np.ndarray:
    if filter not in FILTERS:
        raise ValueError(f"unknown filter {filter!r}")
    ranks = np.empty(len(queries), dtype=np.float64)
    by_dir = defaultdict(list)
    for i, q in enumerate(queries):
        by_dir[q.direction].append(i)
    for idxs in by_dir.values():
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start : start + batch_size]
            qs = [queries[i] for i in chunk]
            S = _scores(params, qs, lam)
            truth = np.array([q.truth for q in qs])
            target = S[np.arange(len(qs)), truth]
            if filter == TIME and known is not None:
                for row, q in enumerate(qs):
                    ex = [e for e in known.positives(q) if e != q.truth]
                    if ex:
                        S[row, ex] = -np.inf
            greater = np.sum(S > target[:, None], axis=1)
            ties = np.sum(S == target[:, None], axis=1) - 1
            ranks[chunk] = 1.0 + greater + ties / 2.0
    return ranks


def evaluate(
    params: Params,
    queries: Sequence[Query],
    known: KnownFacts | None = None,
    lam: float = 1.0,
    filter: str = TIME,
    batch_size: int = 512,
) -> EvalReport:
    if not queries:
        raise ValueError("cannot evaluate an empty query set")
    ranks = rank_all(params, queries, known, lam, filter, batch_size)
    mrr, h1, h3, h10 = metrics_from_ranks(ranks)
    dirs = {q.direction for q in queries}
    direction = "both" if len(dirs) == 2 else dirs.pop()
    return EvalReport(mrr, h1, h3, h10, len(ranks), ranks, filter, direction)
