"""Symbolic explanations of predictions by grounding temporal rules.

Two match modes are supported:

``body``
    The query is the rule head; a training grounding of the body entails the
    missing entity (forward reading of a Horn rule).
``head``
    The query matches a body atom and a training event grounds the head atom,
    e.g. a query ``(China, Make a visit, ?, t)`` explained
    by the training event ``(China, Host a visit, South Korea, t + 4 days)``
    through ``Host a visit(x, y, t+t1) <= Make a visit(x, y, t)``.

Delays are bounded by the miner window ``w_t``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

from .data import Event, Tkg, Vocab
from .evaluator import OBJECT, Query
from .rules import MinerConfig, TemporalRule

BODY = "body"
HEAD = "head"
MODES = (BODY, HEAD)

# variable names of the atoms, in rule order: body atoms then head
_VARS = {1: (("x", "y"), ("x", "y")), 2: (("x", "z"), ("z", "y"), ("x", "y"))}


@dataclass(frozen=True)
class Explanation:
    rule: TemporalRule
    groundings: tuple[Event, ...]
    entailed_entity: int
    mode: str

    @property
    def confidence(self) -> float:
        return self.rule.sc or 0.0


def _time_ok(pattern: str, times: Sequence[int], w: int) -> bool:
    """``times`` holds the time of each atom in rule order (body..., head)."""
    delayed = lambda a, b: 1 <= b - a <= w  # noqa: E731
    if pattern == "P1":
        return delayed(times[0], times[1])
    if pattern == "P2":
        return times[0] == times[1]
    if pattern == "P3":
        return delayed(times[0], times[1]) and delayed(times[1], times[2])
    if pattern == "P4":
        return times[0] == times[1] and delayed(times[1], times[2])
    return times[0] == times[1] == times[2]


def _time_window(pattern: str, idx: int, known: dict[int, int], w: int) -> tuple[int, int]:
    """Inclusive bounds for atom ``idx``'s time given already-fixed atom times."""
    lo, hi = -(10**9), 10**9
    # offsets of each atom relative to the first one: (min, max)
    span = {
        "P1": [(0, 0), (1, w)],
        "P2": [(0, 0), (0, 0)],
        "P3": [(0, 0), (1, w), (2, 2 * w)],
        "P4": [(0, 0), (0, 0), (1, w)],
        "P5": [(0, 0), (0, 0), (0, 0)],
    }[pattern]
    for j, t in known.items():
        if j == idx:
            continue
        # t_idx - t_j lies within span[idx] - span[j]
        lo = max(lo, t + span[idx][0] - span[j][1])
        hi = min(hi, t + span[idx][1] - span[j][0])
    return lo, hi


class _Graph:
    """Edge lookups that also resolve inverse predicate ids on plain graphs."""

    def __init__(self, tkg: Tkg):
        self.tkg = tkg
        self.n = tkg.n_predicates
        self.plain = not tkg.inverse_augmented
        self.out = defaultdict(list)
        self.inc = defaultdict(list)
        for s, p, o, t in tkg.events:
            self.out[s, p].append((o, t))
            self.inc[o, p].append((s, t))

    def _resolve(self, p: int) -> tuple[int, bool]:
        if self.plain and p >= self.n:
            return p - self.n, True
        return p, False

    def from_subject(self, p: int, a: int):
        """``(b, t)`` with ``p(a, b, t)``."""
        base, inv = self._resolve(p)
        return self.inc.get((a, base), ()) if inv else self.out.get((a, p), ())

    def from_object(self, p: int, b: int):
        """``(a, t)`` with ``p(a, b, t)``."""
        base, inv = self._resolve(p)
        return self.out.get((b, base), ()) if inv else self.inc.get((b, p), ())

    def all(self, p: int):
        base, inv = self._resolve(p)
        for (s, q), items in self.out.items():
            if q == base:
                for o, t in items:
                    yield (o, s, t) if inv else (s, o, t)

    def holds(self, p: int, a: int, b: int, t: int) -> bool:
        base, inv = self._resolve(p)
        return ((b, base, a, t) if inv else (a, p, b, t)) in self.tkg


def _ground(rule: TemporalRule, graph: _Graph, fixed_atom: int, binding: dict, t_fixed: int, w: int):
    """Yield (entity binding, atom times) for all groundings of the non-fixed atoms."""
    preds = rule.predicates
    vars_ = _VARS[len(rule.body)]
    order = [i for i in range(len(preds)) if i != fixed_atom]

    def rec(k, env, times):
        if k == len(order):
            if _time_ok(rule.pattern, [times[i] for i in range(len(preds))], w):
                yield dict(env), dict(times)
            return
        i = order[k]
        a, b = vars_[i]
        lo, hi = _time_window(rule.pattern, i, times, w)
        if a in env and b in env:
            cands = [(env[a], o, t) for o, t in graph.from_subject(preds[i], env[a]) if o == env[b]]
        elif a in env:
            cands = [(env[a], o, t) for o, t in graph.from_subject(preds[i], env[a])]
        elif b in env:
            cands = [(s, env[b], t) for s, t in graph.from_object(preds[i], env[b])]
        else:
            cands = list(graph.all(preds[i]))
        for s, o, t in cands:
            if not lo <= t <= hi:
                continue
            new = dict(env)
            if new.setdefault(a, s) != s or new.setdefault(b, o) != o:
                continue
            yield from rec(k + 1, new, {**times, i: t})

    yield from rec(0, dict(binding), {fixed_atom: t_fixed})


def _matches(query: Query, rule: TemporalRule, mode: str):
    """Atoms of ``rule`` that the query can play in ``mode`` and the answer variable."""
    vars_ = _VARS[len(rule.body)]
    atoms = [len(rule.body)] if mode == BODY else list(range(len(rule.body)))
    for i in atoms:
        if rule.predicates[i] != query.p:
            continue
        a, b = vars_[i]
        known, answer = (a, b) if query.direction == OBJECT else (b, a)
        yield i, known, answer


def _explain_all(query: Query, graph: _Graph, rules: Iterable[TemporalRule], w: int, modes):
    for rule in rules:
        vars_ = _VARS[len(rule.body)]
        for mode in modes:
            seen = set()
            for atom, known, answer in _matches(query, rule, mode):
                for t_fixed in query.times:
                    for env, times in _ground(rule, graph, atom, {known: query.anchor}, t_fixed, w):
                        events = tuple(
                            Event(env[vars_[i][0]], rule.predicates[i], env[vars_[i][1]], times[i])
                            for i in sorted(times)
                            if i != atom
                        )
                        key = (env[answer], events)
                        if key not in seen:
                            seen.add(key)
                            yield Explanation(rule, events, env[answer], mode)


def explain(
    query: Query,
    predicted: int,
    tkg_train: Tkg,
    rules: Sequence[TemporalRule],
    cfg: MinerConfig = MinerConfig(),
    modes: Sequence[str] = MODES,
    max_per_rule: int | None = 3,
) -> list[Explanation]:
    """Rule groundings in the training graph that entail ``predicted`` for ``query``."""
    graph = _Graph(tkg_train)
    hits = []
    for rule in rules:
        if query.p not in rule.predicates:
            continue
        found = 0
        for ex in _explain_all(query, graph, [rule], cfg.w_t, modes):
            if ex.entailed_entity != predicted:
                continue
            hits.append(ex)
            found += 1
            if max_per_rule is not None and found >= max_per_rule:
                break
    hits.sort(key=lambda e: (-e.confidence, e.rule.head, e.rule.body, e.rule.pattern, e.mode))
    return hits


def entailed_candidates(
    query: Query,
    tkg_train: Tkg,
    rules: Sequence[TemporalRule],
    cfg: MinerConfig = MinerConfig(),
    modes: Sequence[str] = (BODY,),
) -> dict[int, float]:
    """Entities entailed by some rule grounding, with the best confidence reaching each."""
    graph = _Graph(tkg_train)
    out: dict[int, float] = {}
    relevant = [r for r in rules if query.p in r.predicates]
    for ex in _explain_all(query, graph, relevant, cfg.w_t, modes):
        out[ex.entailed_entity] = max(out.get(ex.entailed_entity, 0.0), ex.confidence)
    return out


def verify(ex: Explanation, tkg_train: Tkg, cfg: MinerConfig = MinerConfig()) -> bool:
    """Check every grounding event against the training graph."""
    graph = _Graph(tkg_train)
    return all(graph.holds(e.p, e.s, e.o, e.t) for e in ex.groundings)


# -- reporting -------------------------------------------------------------------


def format_rule(rule: TemporalRule, vocab: Vocab | None = None) -> str:
    name = vocab.predicate_label if vocab is not None else str
    if rule.pattern == "P1":
        return f"{name(rule.head)}(x, y, t+t1) <= {name(rule.body[0])}(x, y, t)"
    if rule.pattern == "P2":
        return f"{name(rule.head)}(x, y, t) <= {name(rule.body[0])}(x, y, t)"
    p1, p2 = (name(p) for p in rule.body)
    head = {"P3": "t+t1+t2", "P4": "t+t1", "P5": "t"}[rule.pattern]
    second = "t+t1" if rule.pattern == "P3" else "t"
    return f"{name(rule.head)}(x, y, {head}) <= {p1}(x, z, t) & {p2}(z, y, {second})"


def format_event(e: Event, vocab: Vocab | None = None) -> str:
    if vocab is None:
        return f"({e.s}, {e.p}, {e.o}, {e.t})"
    return (
        f"({vocab.entity_names[e.s]}, {vocab.predicate_label(e.p)}, "
        f"{vocab.entity_names[e.o]}, {vocab.time_label(e.t)})"
    )


def format_explanation(ex: Explanation, vocab: Vocab | None = None) -> str:
    ent = vocab.entity_names[ex.entailed_entity] if vocab is not None else str(ex.entailed_entity)
    lines = [
        f"rule: {format_rule(ex.rule, vocab)}",
        f"confidence: {ex.confidence:.4f}",
        f"mode: {ex.mode}",
        f"entails: {ent}",
    ]
    lines += [f"  grounding: {format_event(e, vocab)}" for e in ex.groundings]
    return "\n".join(lines)
