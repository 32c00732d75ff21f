"""Temporal KG datasets: parsing, integer encoding, indices and windows.

Two on-disk formats are understood:

* ``icews-tsv``: ``subject \\t predicate \\t object \\t YYYY-MM-DD``
* ``wikidata-interval-tsv``: ``subject \\t predicate \\t object \\t start \\t end``
  where the endpoints are years (optionally followed by ``-MM-DD``) and
  ``####`` marks an unknown endpoint.

Timestamps are encoded as dense integer steps (days for ICEWS, years for
Wikidata) counted from the earliest time point of the dataset, so that window
arithmetic ``t + t1`` is ordinary integer arithmetic.
"""

from __future__ import annotations

import datetime as dt
import re
from bisect import bisect_left
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

ICEWS = "icews-tsv"
INTERVAL = "wikidata-interval-tsv"
FORMATS = (ICEWS, INTERVAL)

INVERSE_SUFFIX = "⁻¹"
UNKNOWN_TIME = "####"

_YEAR_RE = re.compile(r"^(-?\d{1,4})(?:-[\d#]{2}-[\d#]{2})?$")
_DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")


class ParseError(ValueError):
    """A line in a dataset file could not be parsed."""

    def __init__(self, message: str, path: str | Path | None = None, lineno: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if lineno is not None:
            where += f":{lineno}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.lineno = lineno


class TimeFormatError(ParseError):
    """A time field is in an unsupported format."""


class DataError(ValueError):
    """Structurally invalid data (e.g. an interval that ends before it starts)."""


class Event(NamedTuple):
    s: int
    p: int
    o: int
    t: int


@dataclass(frozen=True)
class Vocab:
    entity_names: tuple[str, ...] = ()
    predicate_names: tuple[str, ...] = ()
    timestamp_values: tuple[int, ...] = ()
    time_unit: str = "day"
    # first calendar day (ICEWS) or first year (Wikidata) of the timeline
    time_origin: int = 0
    _ent_index: dict = field(init=False, repr=False, compare=False)
    _pred_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ent = {n: i for i, n in enumerate(self.entity_names)}
        pred = {n: i for i, n in enumerate(self.predicate_names)}
        if len(ent) != len(self.entity_names):
            raise DataError("duplicate entity names")
        if len(pred) != len(self.predicate_names):
            raise DataError("duplicate predicate names")
        ts = self.timestamp_values
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError("timestamp values must be strictly increasing")
        object.__setattr__(self, "_ent_index", ent)
        object.__setattr__(self, "_pred_index", pred)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_predicates(self) -> int:
        return len(self.predicate_names)

    @property
    def n_timestamps(self) -> int:
        return len(self.timestamp_values)

    def entity_id(self, name: str) -> int:
        return self._ent_index[name]

    def predicate_id(self, name: str) -> int:
        return self._pred_index[name]

    def has_entity(self, name: str) -> bool:
        return name in self._ent_index

    def has_predicate(self, name: str) -> bool:
        return name in self._pred_index

    def time_label(self, t: int) -> str:
        """Human readable label of timestamp index ``t`` (ISO date or year)."""
        value = self.time_origin + t
        if self.time_unit == "day":
            return dt.date.fromordinal(value).isoformat()
        return str(value)

    def time_index(self, label: str) -> int:
        if self.time_unit == "day":
            if not _DATE_RE.match(label):
                raise TimeFormatError(f"unknown date format {label!r}")
            return dt.date.fromisoformat(label).toordinal() - self.time_origin
        m = _YEAR_RE.match(label)
        if not m:
            raise TimeFormatError(f"unknown year format {label!r}")
        return int(m.group(1)) - self.time_origin

    def with_inverses(self) -> "Vocab":
        if any(n.endswith(INVERSE_SUFFIX) for n in self.predicate_names):
            raise DataError("vocabulary already contains inverse predicates")
        names = self.predicate_names + tuple(n + INVERSE_SUFFIX for n in self.predicate_names)
        return Vocab(self.entity_names, names, self.timestamp_values, self.time_unit, self.time_origin)

    def predicate_label(self, p: int) -> str:
        """Name of predicate ``p``; ids past the base vocabulary are inverses."""
        n = self.n_predicates
        if p < n:
            return self.predicate_names[p]
        return self.predicate_names[p - n] + INVERSE_SUFFIX

    def predicate_from_label(self, label: str) -> int:
        if label in self._pred_index:
            return self._pred_index[label]
        if label.endswith(INVERSE_SUFFIX):
            base = label[: -len(INVERSE_SUFFIX)]
            if base in self._pred_index:
                return self._pred_index[base] + self.n_predicates
        raise KeyError(label)

    def export(self, directory: str | Path) -> dict[str, Path]:
        """Write ``vocab.ent``, ``vocab.pred`` and ``vocab.time`` (line number = id)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = {}
        for suffix, names in (
            ("ent", self.entity_names),
            ("pred", self.predicate_names),
            ("time", [self.time_label(t) for t in range(self.n_timestamps)]),
        ):
            path = directory / f"vocab.{suffix}"
            path.write_text("".join(f"{n}\n" for n in names), encoding="utf-8")
            out[suffix] = path
        return out

    @classmethod
    def load(cls, directory: str | Path) -> "Vocab":
        directory = Path(directory)

        def lines(name):
            text = (directory / name).read_text(encoding="utf-8")
            return tuple(text.splitlines())

        ents, preds, times = lines("vocab.ent"), lines("vocab.pred"), lines("vocab.time")
        if times and _DATE_RE.match(times[0]):
            unit, origin = "day", dt.date.fromisoformat(times[0]).toordinal()
        else:
            unit, origin = "year", int(times[0]) if times else 0
        return cls(ents, preds, tuple(range(len(times))), unit, origin)


class Tkg:
    """An immutable, deduplicated set of events with lookup indices.

    ``n_predicates`` is the number of *base* predicates; when the graph is
    inverse-augmented, ids ``n_predicates .. 2*n_predicates-1`` are inverses.
    """

    def __init__(
        self,
        events: Iterable[Sequence[int]] = (),
        n_entities: int | None = None,
        n_predicates: int | None = None,
        n_timestamps: int | None = None,
        inverse_augmented: bool = False,
    ):
        uniq = sorted({Event(*map(int, e)) for e in events}, key=lambda e: (e.t, e.p, e.s, e.o))
        self.events: tuple[Event, ...] = tuple(uniq)
        self.inverse_augmented = inverse_augmented
        max_e = max((max(e.s, e.o) for e in uniq), default=-1) + 1
        max_p = max((e.p for e in uniq), default=-1) + 1
        max_t = max((e.t for e in uniq), default=-1) + 1
        if inverse_augmented:
            max_p = (max_p + 1) // 2
        self.n_entities = max_e if n_entities is None else n_entities
        self.n_predicates = max_p if n_predicates is None else n_predicates
        self.n_timestamps = max_t if n_timestamps is None else n_timestamps
        n_rel = self.n_relations
        for e in uniq:
            if not (0 <= e.s < self.n_entities and 0 <= e.o < self.n_entities):
                raise DataError(f"entity id out of range in {e}")
            if not 0 <= e.p < n_rel:
                raise DataError(f"predicate id out of range in {e}")
            if not 0 <= e.t < self.n_timestamps:
                raise DataError(f"timestamp out of range in {e}")

        by_sp = defaultdict(list)
        by_p_t = defaultdict(set)
        by_pair_p = defaultdict(list)
        for s, p, o, t in uniq:
            by_sp[s, p].append((o, t))
            by_p_t[p, t].add((s, o))
            by_pair_p[s, o, p].append(t)
        self.by_sp = {k: tuple(sorted(v)) for k, v in by_sp.items()}
        self.by_p_t = {k: frozenset(v) for k, v in by_p_t.items()}
        self.by_pair_p = {k: tuple(sorted(v)) for k, v in by_pair_p.items()}

    @property
    def n_relations(self) -> int:
        """Number of predicate ids in use (doubled after inverse augmentation)."""
        return 2 * self.n_predicates if self.inverse_augmented else self.n_predicates

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.events)

    def __contains__(self, quad) -> bool:
        s, p, o, t = quad
        ts = self.by_pair_p.get((s, o, p))
        if not ts:
            return False
        i = bisect_left(ts, t)
        return i < len(ts) and ts[i] == t

    def as_array(self) -> np.ndarray:
        if not self.events:
            return np.zeros((0, 4), dtype=np.int64)
        return np.asarray(self.events, dtype=np.int64)

    def counts_by_predicate_time(self) -> np.ndarray:
        """``c[p, t]`` = number of distinct (s, o) pairs with ``p(s, o, t)``."""
        c = np.zeros((self.n_relations, self.n_timestamps), dtype=np.int64)
        for (p, t), pairs in self.by_p_t.items():
            c[p, t] = len(pairs)
        return c

    def union(self, other: "Tkg") -> "Tkg":
        if other.inverse_augmented != self.inverse_augmented:
            raise DataError("cannot merge augmented and plain graphs")
        return Tkg(
            self.events + other.events,
            n_entities=max(self.n_entities, other.n_entities),
            n_predicates=max(self.n_predicates, other.n_predicates),
            n_timestamps=max(self.n_timestamps, other.n_timestamps),
            inverse_augmented=self.inverse_augmented,
        )


@dataclass(frozen=True)
class StaticGraph:
    triples: frozenset
    n_entities: int
    n_relations: int
    # predicate -> frozenset of (s, o)
    pairs: dict = field(repr=False)

    def __len__(self) -> int:
        return len(self.triples)


@dataclass
class Dataset:
    """Train/valid/test splits sharing one vocabulary.

    ``intervals`` keeps the original (s, p, o, t_start, t_end) rows of each split,
    which evaluation on interval data needs to average endpoint scores.
    """

    vocab: Vocab
    train: Tkg
    valid: Tkg
    test: Tkg
    intervals: dict[str, list[tuple[int, int, int, int, int]]]
    fmt: str = ICEWS

    def all_events(self) -> Tkg:
        return self.train.union(self.valid).union(self.test)


def split_interval_event(s: int, p: int, o: int, t_start: int, t_end: int) -> list[Event]:
    if t_start > t_end:
        raise DataError(f"interval starts after it ends: [{t_start}, {t_end}]")
    if t_start == t_end:
        return [Event(s, p, o, t_start)]
    return [Event(s, p, o, t_start), Event(s, p, o, t_end)]


def project_gskg(tkg: Tkg) -> StaticGraph:
    pairs = defaultdict(set)
    triples = set()
    for s, p, o, _ in tkg.events:
        triples.add((s, p, o))
        pairs[p].add((s, o))
    return StaticGraph(
        frozenset(triples),
        tkg.n_entities,
        tkg.n_relations,
        {p: frozenset(v) for p, v in pairs.items()},
    )


def augment_inverses(tkg: Tkg) -> Tkg:
    if tkg.inverse_augmented:
        raise DataError("graph is already inverse-augmented")
    n = tkg.n_predicates
    inverse = [(o, p + n, s, t) for s, p, o, t in tkg.events]
    return Tkg(
        tkg.events + tuple(inverse),
        n_entities=tkg.n_entities,
        n_predicates=n,
        n_timestamps=tkg.n_timestamps,
        inverse_augmented=True,
    )


def window_events(tkg: Tkg, t0: int, w: int) -> list[Event]:
    """Events with ``t0 <= t < t0 + w``."""
    if w < 1:
        raise ValueError("window size must be >= 1")
    # events are sorted by time first
    ts = [e.t for e in tkg.events]
    lo, hi = bisect_left(ts, t0), bisect_left(ts, t0 + w)
    return list(tkg.events[lo:hi])


# -- parsing -----------------------------------------------------------------


def _read_raw(path: Path, fmt: str) -> list[tuple[str, str, str, str, str]]:
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    want = 4 if fmt == ICEWS else 5
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != want:
                raise ParseError(f"expected {want} tab-separated fields, got {len(parts)}", path, lineno)
            if fmt == ICEWS:
                s, p, o, t = parts
                if not _DATE_RE.match(t):
                    raise TimeFormatError(f"unknown date format {t!r}", path, lineno)
                try:
                    dt.date.fromisoformat(t)
                except ValueError as exc:
                    raise TimeFormatError(str(exc), path, lineno) from None
                rows.append((s, p, o, t, t))
            else:
                s, p, o, ts, te = parts
                for v in (ts, te):
                    if not v.startswith(UNKNOWN_TIME) and not _YEAR_RE.match(v):
                        raise TimeFormatError(f"unknown year format {v!r}", path, lineno)
                rows.append((s, p, o, ts, te))
    return rows


def _time_value(raw: str, fmt: str) -> int | None:
    if fmt == ICEWS:
        return dt.date.fromisoformat(raw).toordinal()
    if raw.startswith(UNKNOWN_TIME):
        return None
    return int(_YEAR_RE.match(raw).group(1))


def _encode(splits: dict[str, list], fmt: str) -> Dataset:
    ent: dict[str, int] = {}
    pred: dict[str, int] = {}
    known = []
    for rows in splits.values():
        for s, p, o, ts, te in rows:
            ent.setdefault(s, len(ent))
            pred.setdefault(p, len(pred))
            ent.setdefault(o, len(ent))
            for raw in (ts, te):
                v = _time_value(raw, fmt)
                if v is not None:
                    known.append(v)
    lo = min(known, default=0)
    hi = max(known, default=-1)
    vocab = Vocab(
        tuple(ent),
        tuple(pred),
        tuple(range(hi - lo + 1)),
        "day" if fmt == ICEWS else "year",
        lo,
    )
    graphs, intervals = {}, {}
    for name, rows in splits.items():
        events, spans = [], []
        for s, p, o, ts, te in rows:
            a, b = _time_value(ts, fmt), _time_value(te, fmt)
            a = lo if a is None else a
            b = hi if b is None else b
            quad = (ent[s], pred[p], ent[o])
            spans.append(quad + (a - lo, b - lo))
            events.extend(split_interval_event(*quad, a - lo, b - lo))
        graphs[name] = Tkg(events, len(ent), len(pred), vocab.n_timestamps)
        intervals[name] = spans
    return Dataset(
        vocab,
        graphs.get("train", Tkg((), len(ent), len(pred), vocab.n_timestamps)),
        graphs.get("valid", Tkg((), len(ent), len(pred), vocab.n_timestamps)),
        graphs.get("test", Tkg((), len(ent), len(pred), vocab.n_timestamps)),
        intervals,
        fmt,
    )


def parse_dataset(path: str | Path, fmt: str = ICEWS) -> tuple[Vocab, Tkg]:
    """Parse a single file into a vocabulary and a graph."""
    ds = _encode({"train": _read_raw(Path(path), fmt)}, fmt)
    return ds.vocab, ds.train


SPLIT_FILES = {"train": ("train", "train.txt"), "valid": ("valid", "valid.txt"), "test": ("test", "test.txt")}


def find_split_file(directory: Path, split: str) -> Path:
    for name in SPLIT_FILES[split]:
        if (directory / name).is_file():
            return directory / name
    raise FileNotFoundError(f"missing {split} split in {directory} (tried {', '.join(SPLIT_FILES[split])})")


def load_dataset(directory: str | Path, fmt: str = ICEWS) -> Dataset:
    """Load ``train``/``valid``/``test`` from a directory with a shared vocabulary."""
    directory = Path(directory)
    raw = {split: _read_raw(find_split_file(directory, split), fmt) for split in SPLIT_FILES}
    return _encode(raw, fmt)


# -- encoded splits --------------------------------------------------------------

_ROW_DTYPE = np.dtype("<i8")


def write_encoded(ds: Dataset, directory: str | Path) -> dict[str, Path]:
    """Write the vocabulary plus ``{split}.bin`` files of int64 (s, p, o, t_start, t_end) rows."""
    directory = Path(directory)
    out = {f"vocab.{k}": v for k, v in ds.vocab.export(directory).items()}
    for split in SPLIT_FILES:
        rows = np.asarray(ds.intervals.get(split, []), dtype=_ROW_DTYPE).reshape(-1, 5)
        path = directory / f"{split}.bin"
        path.write_bytes(rows.tobytes())
        out[f"{split}.bin"] = path
    (directory / "format").write_text(ds.fmt + "\n", encoding="utf-8")
    out["format"] = directory / "format"
    return out


def read_encoded(directory: str | Path) -> Dataset:
    directory = Path(directory)
    vocab = Vocab.load(directory)
    fmt_file = directory / "format"
    fmt = fmt_file.read_text(encoding="utf-8").strip() if fmt_file.exists() else ICEWS
    E, P, T = vocab.n_entities, vocab.n_predicates, vocab.n_timestamps
    graphs, intervals = {}, {}
    for split in SPLIT_FILES:
        path = directory / f"{split}.bin"
        if not path.exists():
            raise FileNotFoundError(f"missing encoded split {path}")
        rows = np.frombuffer(path.read_bytes(), dtype=_ROW_DTYPE).reshape(-1, 5)
        spans = [tuple(int(x) for x in r) for r in rows]
        events = [e for r in spans for e in split_interval_event(*r)]
        graphs[split] = Tkg(events, E, P, T)
        intervals[split] = spans
    return Dataset(vocab, graphs["train"], graphs["valid"], graphs["test"], intervals, fmt)
