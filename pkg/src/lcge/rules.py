"""Temporal rule mining.

Static closed rules are mined from the time-masked graph (``len1``:
``p2(x,y) <= p1(x,y)`` and ``len2``: ``p3(x,y) <= p1(x,z) & p2(z,y)``), expanded
into the five temporal patterns and scored per timestamp:

====  =====================================================  ==========
P1    p2(x, y, t+t1) <= p1(x, y, t)                           delayed
P2    p2(x, y, t)    <= p1(x, y, t)                           same time
P3    p3(x, y, t+t1+t2) <= p1(x, z, t) & p2(z, y, t+t1)      delayed
P4    p3(x, y, t+t1) <= p1(x, z, t) & p2(z, y, t)            delayed
P5    p3(x, y, t)    <= p1(x, z, t) & p2(z, y, t)            same time
====  =====================================================  ==========

Every delay ranges over ``1..w_t``.  At each timestamp ``t`` the scorer counts
support ``sd(t)``, a confidence denominator and a head-coverage denominator;
the rule's sd/sc/hc are means over the timestamps with a nonzero denominator.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .data import ParseError, StaticGraph, Tkg, Vocab, project_gskg

LEN1_PATTERNS = ("P1", "P2")
LEN2_PATTERNS = ("P3", "P4", "P5")
PATTERNS = LEN1_PATTERNS + LEN2_PATTERNS
SAME_TIME = ("P2", "P5")

# brute-force oracle size guard
ORACLE_MAX_ENTITIES = 64
ORACLE_MAX_TIMESTAMPS = 32


@dataclass(frozen=True)
class MinerConfig:
    w_t: int = 3
    t_sc: float = 0.1
    t_hc: float = 0.1
    static_t_sc: float = 0.1
    static_t_hc: float = 0.01
    max_body_len: int = 2

    def __post_init__(self):
        if self.w_t < 1:
            raise ValueError("w_t must be >= 1")
        for name in ("t_sc", "t_hc", "static_t_sc", "static_t_hc"):
            v = getattr(self, name)
            # thresholds above 1 are allowed: they simply reject every rule
            if v < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_body_len not in (1, 2):
            raise ValueError("max_body_len must be 1 or 2")


@dataclass(frozen=True)
class StaticRule:
    head: int
    body: tuple[int, ...]
    sc: float
    hc: float
    support: int = 0

    @property
    def shape(self) -> str:
        return "len1" if len(self.body) == 1 else "len2-chain"


@dataclass(frozen=True, order=False)
class TemporalRule:
    pattern: str
    head: int
    body: tuple[int, ...]
    sd: float | None = None
    sc: float | None = None
    hc: float | None = None

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}")
        want = 1 if self.pattern in LEN1_PATTERNS else 2
        if len(self.body) != want:
            raise ValueError(f"pattern {self.pattern} needs a body of length {want}")

    @property
    def predicates(self) -> tuple[int, ...]:
        return self.body + (self.head,)

    def sort_key(self):
        return (-(self.sc or 0.0), self.head, self.body, self.pattern)


class Counts(NamedTuple):
    """Per-timestamp integer counts for one candidate.

    ``sc_den`` already includes the ``w_t`` factor of the delayed patterns.
    """

    sd: np.ndarray
    sc_den: np.ndarray
    hc_den: np.ndarray


def aggregate(counts: Counts) -> tuple[float, float, float]:
    """Means over timestamps whose denominators are nonzero; 0 if there are none."""
    sd, sc_den, hc_den = counts
    body = sc_den > 0
    head = hc_den > 0
    if not body.any():
        sd_mean = sc = 0.0
    else:
        sd_mean = float(sd[body].mean())
        sc = float((sd[body] / sc_den[body]).mean())
    hc = float((sd[head] / hc_den[head]).mean()) if head.any() else 0.0
    return sd_mean, sc, hc


def _window_sum(c: np.ndarray, w: int) -> np.ndarray:
    """``out[t] = sum_{k=1..w} c[t+k]`` (zero past the end)."""
    T = len(c)
    cs = np.concatenate([[0], np.cumsum(c)])
    t = np.arange(T)
    hi = np.minimum(t + w, T - 1)
    lo = t  # exclusive
    out = cs[hi + 1] - cs[lo + 1]
    out[t + 1 > T - 1] = 0
    return out


def _double_window_sum(c: np.ndarray, w: int) -> np.ndarray:
    """``out[t] = sum_{k1,k2 in 1..w} c[t+k1+k2]``."""
    T = len(c)
    out = np.zeros(T, dtype=np.int64)
    for k in range(2, 2 * w + 1):
        mult = w - abs(k - (w + 1))
        if k < T:
            out[: T - k] += mult * c[k:]
    return out


# -- static mining -------------------------------------------------------------


def _adjacency(g: StaticGraph) -> dict[int, sp.csr_matrix]:
    n = g.n_entities
    out = {}
    for p, pairs in g.pairs.items():
        if not pairs:
            continue
        arr = np.fromiter((x for pair in pairs for x in pair), dtype=np.int64).reshape(-1, 2)
        out[p] = sp.csr_matrix((np.ones(len(arr), dtype=np.int64), (arr[:, 0], arr[:, 1])), shape=(n, n))
    return out


def mine_static_rules(g: StaticGraph, cfg: MinerConfig = MinerConfig()) -> list[StaticRule]:
    """Exhaustive closed-rule enumeration for body lengths 1 and 2.

    ``sc = support / #body pairs`` and ``hc = support / #head pairs``, both
    counted over distinct (x, y) entity pairs.
    """
    n, P = g.n_entities, g.n_relations
    if not g.triples or n == 0:
        return []
    rules: list[StaticRule] = []

    # pair -> predicate incidence over the distinct (x, y) pairs of the graph
    keys_by_p = {p: np.fromiter((s * n + o for s, o in pairs), dtype=np.int64) for p, pairs in g.pairs.items()}
    pair_keys = np.unique(np.concatenate(list(keys_by_p.values())))
    rows, cols = [], []
    for p, keys in keys_by_p.items():
        rows.append(np.searchsorted(pair_keys, keys))
        cols.append(np.full(len(keys), p, dtype=np.int64))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    H = sp.csr_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(len(pair_keys), P))
    head_count = np.asarray(H.sum(axis=0)).ravel()

    co = (H.T @ H).toarray()
    for p1 in range(P):
        if head_count[p1] == 0:
            continue
        for p2 in np.nonzero(co[p1])[0]:
            if p2 == p1:
                continue
            support = int(co[p1, p2])
            sc, hc = support / head_count[p1], support / head_count[p2]
            if sc >= cfg.static_t_sc and hc >= cfg.static_t_hc and hc > 0:
                rules.append(StaticRule(int(p2), (int(p1),), float(sc), float(hc), support))

    if cfg.max_body_len < 2:
        return rules

    adj = _adjacency(g)
    preds = sorted(adj)
    big = sp.hstack([adj[p] for p in preds], format="csr") if preds else None
    pred_arr = np.asarray(preds, dtype=np.int64)
    for p1 in preds:
        R = (adj[p1] @ big).tocoo()
        if R.nnz == 0:
            continue
        x = R.row.astype(np.int64)
        block = R.col.astype(np.int64) // n
        y = R.col.astype(np.int64) % n
        p2 = pred_arr[block]
        body_count = np.bincount(p2, minlength=P)
        key = x * n + y
        idx = np.searchsorted(pair_keys, key)
        idx[idx == len(pair_keys)] = 0
        hit = pair_keys[idx] == key
        Q = sp.csr_matrix(
            (np.ones(int(hit.sum()), dtype=np.int64), (p2[hit], idx[hit])), shape=(P, len(pair_keys))
        )
        S = (Q @ H).tocoo()
        for q2, q3, support in zip(S.row, S.col, S.data):
            sc = support / body_count[q2]
            hc = support / head_count[q3]
            if sc >= cfg.static_t_sc and hc >= cfg.static_t_hc and hc > 0:
                rules.append(StaticRule(int(q3), (int(p1), int(q2)), float(sc), float(hc), int(support)))
    rules.sort(key=lambda r: (-r.sc, r.head, r.body))
    return rules


def expand_candidates(r: StaticRule | Iterable[StaticRule]) -> list[TemporalRule]:
    if not isinstance(r, StaticRule):
        return [c for rule in r for c in expand_candidates(rule)]
    patterns = LEN1_PATTERNS if len(r.body) == 1 else LEN2_PATTERNS
    return [TemporalRule(p, r.head, tuple(r.body)) for p in patterns]


# -- indexed temporal scoring -----------------------------------------------------


class _Index:
    """Per-graph lookups shared by all candidates of one mining run."""

    def __init__(self, tkg: Tkg):
        self.tkg = tkg
        self.T = tkg.n_timestamps
        self.counts = tkg.counts_by_predicate_time()
        pairs = defaultdict(set)
        out = defaultdict(list)
        at = defaultdict(list)
        for s, p, o, t in tkg.events:
            pairs[p].add((s, o))
            out[s, p].append((t, o))
            at[p].append((t, s, o))
        self.pairs = pairs
        # (s, p) -> sorted times and aligned objects
        self.out = {}
        for k, v in out.items():
            v.sort()
            self.out[k] = ([t for t, _ in v], [o for _, o in v])
        self.at = at
        self.times = tkg.by_pair_p

    def count(self, p: int) -> np.ndarray:
        if p < len(self.counts):
            return self.counts[p]
        return np.zeros(self.T, dtype=np.int64)


def _zeros(T: int) -> np.ndarray:
    return np.zeros(T, dtype=np.int64)


def _score_len1(idx: _Index, pattern: str, p1: int, p2: int, w: int) -> Counts:
    T = idx.T
    sd = _zeros(T)
    times = idx.times
    for a, b in idx.pairs.get(p1, ()):
        ts2 = times.get((a, b, p2))
        if not ts2:
            continue
        ts1 = times[a, b, p1]
        if pattern == "P2":
            for t in set(ts1).intersection(ts2):
                sd[t] += 1
        else:
            for t in ts1:
                sd[t] += bisect_right(ts2, t + w) - bisect_right(ts2, t)
    c1, c2 = idx.count(p1), idx.count(p2)
    if pattern == "P2":
        return Counts(sd, c1.copy(), c2.copy())
    return Counts(sd, w * c1, _window_sum(c2, w))


def _chains(idx: _Index, p1: int, p2: int, w: int, delayed: bool) -> dict:
    """Distinct body groundings.

    Same-time: ``{t: {(a, c)}}``; delayed (P3): ``{(t, k1): {(a, c)}}`` where the
    second body atom holds at ``t + k1``.
    """
    chains = defaultdict(set)
    out = idx.out
    for t, a, b in idx.at.get(p1, ()):
        nxt = out.get((b, p2))
        if nxt is None:
            continue
        ts, os_ = nxt
        if delayed:
            lo, hi = bisect_right(ts, t), bisect_right(ts, t + w)
            for i in range(lo, hi):
                chains[t, ts[i] - t].add((a, os_[i]))
        else:
            lo, hi = bisect_left(ts, t), bisect_right(ts, t)
            for i in range(lo, hi):
                chains[t].add((a, os_[i]))
    return chains


def _score_len2_from_chains(idx: _Index, pattern: str, chains: dict, p3: int, w: int) -> Counts:
    T = idx.T
    sd = _zeros(T)
    body = _zeros(T)
    times = idx.times
    c3 = idx.count(p3)
    if pattern == "P5":
        for t, pairs in chains.items():
            body[t] = len(pairs)
            sd[t] = sum(1 for a, c in pairs if t in _tset(times.get((a, c, p3))))
        return Counts(sd, body, c3.copy())
    if pattern == "P4":
        for t, pairs in chains.items():
            body[t] = len(pairs)
            n = 0
            for a, c in pairs:
                ts3 = times.get((a, c, p3))
                if ts3:
                    n += bisect_right(ts3, t + w) - bisect_right(ts3, t)
            sd[t] = n
        return Counts(sd, w * body, _window_sum(c3, w))
    # P3
    for (t, k1), pairs in chains.items():
        body[t] += len(pairs)
        t1 = t + k1
        n = 0
        for a, c in pairs:
            ts3 = times.get((a, c, p3))
            if ts3:
                n += bisect_right(ts3, t1 + w) - bisect_right(ts3, t1)
        sd[t] += n
    return Counts(sd, w * body, _double_window_sum(c3, w))


def _tset(ts):
    return ts if ts is not None else ()


def _check_pattern(c: TemporalRule, allowed: Sequence[str]):
    if c.pattern not in allowed:
        raise ValueError(f"candidate pattern {c.pattern} not in {allowed}")


def score_counts(c: TemporalRule, tkg: Tkg, cfg: MinerConfig, _idx: _Index | None = None) -> Counts:
    idx = _idx or _Index(tkg)
    if c.pattern in LEN1_PATTERNS:
        return _score_len1(idx, c.pattern, c.body[0], c.head, cfg.w_t)
    chains = _chains(idx, c.body[0], c.body[1], cfg.w_t, delayed=c.pattern == "P3")
    return _score_len2_from_chains(idx, c.pattern, chains, c.head, cfg.w_t)


def score_len1(c: TemporalRule, tkg: Tkg, cfg: MinerConfig) -> tuple[float, float, float]:
    _check_pattern(c, LEN1_PATTERNS)
    return aggregate(score_counts(c, tkg, cfg))


def score_len2(c: TemporalRule, tkg: Tkg, cfg: MinerConfig) -> tuple[float, float, float]:
    _check_pattern(c, LEN2_PATTERNS)
    return aggregate(score_counts(c, tkg, cfg))


def score_candidates(candidates: Sequence[TemporalRule], tkg: Tkg, cfg: MinerConfig) -> list[TemporalRule]:
    """Score many candidates, sharing body-grounding enumeration between heads."""
    idx = _Index(tkg)
    scored = []
    groups = defaultdict(list)
    for c in candidates:
        if c.pattern in LEN1_PATTERNS:
            sd, sc, hc = aggregate(_score_len1(idx, c.pattern, c.body[0], c.head, cfg.w_t))
            scored.append(replace(c, sd=sd, sc=sc, hc=hc))
        else:
            groups[c.body, c.pattern == "P3"].append(c)
    for (body, delayed), group in groups.items():
        chains = _chains(idx, body[0], body[1], cfg.w_t, delayed)
        for c in group:
            sd, sc, hc = aggregate(_score_len2_from_chains(idx, c.pattern, chains, c.head, cfg.w_t))
            scored.append(replace(c, sd=sd, sc=sc, hc=hc))
    return scored


def mine(tkg: Tkg, cfg: MinerConfig = MinerConfig(), static_rules: Sequence[StaticRule] | None = None) -> list[TemporalRule]:
    """Static rules -> temporal candidates -> windowed scores -> threshold filter.

    ``static_rules`` may be supplied (e.g. imported from an external miner);
    otherwise they are mined from the time-masked ``tkg``.
    """
    if static_rules is None:
        static_rules = mine_static_rules(project_gskg(tkg), cfg)
    candidates = expand_candidates(static_rules)
    scored = score_candidates(candidates, tkg, cfg)
    kept = [r for r in scored if r.sc >= cfg.t_sc and r.hc >= cfg.t_hc]
    kept.sort(key=TemporalRule.sort_key)
    return kept


# -- brute force oracle ----------------------------------------------------------


def _dense(tkg: Tkg) -> np.ndarray:
    X = np.zeros((tkg.n_relations, tkg.n_entities, tkg.n_entities, tkg.n_timestamps), dtype=bool)
    for s, p, o, t in tkg.events:
        X[p, s, o, t] = True
    return X


def brute_force_counts(c: TemporalRule, tkg: Tkg, cfg: MinerConfig) -> Counts:
    """Per-timestamp counts by dense enumeration over all entity and time tuples."""
    E, T = tkg.n_entities, tkg.n_timestamps
    if E > ORACLE_MAX_ENTITIES or T > ORACLE_MAX_TIMESTAMPS:
        raise ValueError(
            f"graph too large for brute force ({E} entities, {T} timestamps; "
            f"limit {ORACLE_MAX_ENTITIES}/{ORACLE_MAX_TIMESTAMPS})"
        )
    w = cfg.w_t
    X = _dense(tkg)
    R = X.shape[0]

    def atom(p, t):
        if 0 <= p < R and 0 <= t < T:
            return X[p, :, :, t]
        return np.zeros((E, E), dtype=bool)

    def chain(p1, ta, p2, tb):
        return (atom(p1, ta).astype(np.int64) @ atom(p2, tb).astype(np.int64)) > 0

    sd, scd, hcd = _zeros(T), _zeros(T), _zeros(T)
    delays = range(1, w + 1)
    pat = c.pattern
    for t in range(T):
        if pat == "P2":
            (p1,), p2 = c.body, c.head
            sd[t] = (atom(p1, t) & atom(p2, t)).sum()
            scd[t] = atom(p1, t).sum()
            hcd[t] = atom(p2, t).sum()
        elif pat == "P1":
            (p1,), p2 = c.body, c.head
            sd[t] = sum((atom(p1, t) & atom(p2, t + k)).sum() for k in delays)
            scd[t] = w * atom(p1, t).sum()
            hcd[t] = sum(atom(p2, t + k).sum() for k in delays)
        elif pat == "P5":
            (p1, p2), p3 = c.body, c.head
            body = chain(p1, t, p2, t)
            sd[t] = (body & atom(p3, t)).sum()
            scd[t] = body.sum()
            hcd[t] = atom(p3, t).sum()
        elif pat == "P4":
            (p1, p2), p3 = c.body, c.head
            body = chain(p1, t, p2, t)
            sd[t] = sum((body & atom(p3, t + k)).sum() for k in delays)
            scd[t] = w * body.sum()
            hcd[t] = sum(atom(p3, t + k).sum() for k in delays)
        else:
            (p1, p2), p3 = c.body, c.head
            n_body = 0
            for k1 in delays:
                body = chain(p1, t, p2, t + k1)
                n_body += body.sum()
                for k2 in delays:
                    sd[t] += (body & atom(p3, t + k1 + k2)).sum()
                    hcd[t] += atom(p3, t + k1 + k2).sum()
            scd[t] = w * n_body
    return Counts(sd, scd, hcd)


def brute_force_oracle(c: TemporalRule, tkg: Tkg, cfg: MinerConfig) -> tuple[float, float, float]:
    if len(tkg) == 0:
        return 0.0, 0.0, 0.0
    return aggregate(brute_force_counts(c, tkg, cfg))


# -- rule files ------------------------------------------------------------------


def format_rule(r: TemporalRule, vocab: Vocab | None = None) -> str:
    name = vocab.predicate_label if vocab is not None else str
    x = lambda v: "nan" if v is None else repr(float(v))  # noqa: E731
    return "\t".join([r.pattern, name(r.head), ",".join(name(p) for p in r.body), x(r.sd), x(r.sc), x(r.hc)])


def write_rules(path: str | Path, rules: Iterable[TemporalRule], vocab: Vocab | None = None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rules:
            f.write(format_rule(r, vocab) + "\n")


def read_rules(path: str | Path, vocab: Vocab | None = None) -> list[TemporalRule]:
    """Read the tab-separated rule format (also used to import external rules)."""
    lookup = vocab.predicate_from_label if vocab is not None else int
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ParseError(f"expected 6 tab-separated fields, got {len(parts)}", path, lineno)
            pattern, head, body, sd, sc, hc = parts
            try:
                rule = TemporalRule(
                    pattern,
                    lookup(head),
                    tuple(lookup(b) for b in body.split(",")),
                    *(None if math.isnan(float(v)) else float(v) for v in (sd, sc, hc)),
                )
            except KeyError as exc:
                raise ParseError(f"unknown predicate {exc.args[0]!r}", path, lineno) from None
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from None
            rules.append(rule)
    return rules


def pattern_counts(rules: Iterable[TemporalRule]) -> dict[str, int]:
    out = {p: 0 for p in PATTERNS}
    for r in rules:
        out[r.pattern] += 1
    return out
