"""Learnable parameters and scoring kernels.

Time-sensitive score (ComplEx-style with a time-modulated relation plus a
causality vector)::

    e1(s, p, o, t) = Re(sum_i s_i * (p_i * t_i + pr_i) * conj(o_i))

Time-independent concept score over ``k = d / 2`` dimensions::

    e2(s, p, o) = Re(sum_i sc_i * pc_i * conj(oc_i))

Rule penalties tie causality vectors of rule predicates together through the
time transfer vector ``T`` (``*`` is the elementwise product)::

    P1: |T*a - b|^2            P2: |a - b|^2
    P3: |(T*T*a)*(T*b) - c|^2  P4: |(T*a)*(T*b) - c|^2   P5: |a*b - c|^2
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

TENSORS = ("ent", "pred", "pred_r", "time", "t_op", "ent_c", "pred_c")
INIT_SCALE = 1e-2
MAGIC = b"LCGE1"


class ConfigError(ValueError):
    pass


@dataclass
class Params:
    ent: np.ndarray
    pred: np.ndarray
    pred_r: np.ndarray
    time: np.ndarray
    t_op: np.ndarray
    ent_c: np.ndarray
    pred_c: np.ndarray

    @property
    def d(self) -> int:
        return self.ent.shape[1]

    @property
    def k(self) -> int:
        return self.ent_c.shape[1]

    @property
    def n_entities(self) -> int:
        return self.ent.shape[0]

    @property
    def n_predicates(self) -> int:
        return self.pred.shape[0]

    @property
    def n_timestamps(self) -> int:
        return self.time.shape[0]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in TENSORS:
            yield name, getattr(self, name)

    def copy(self) -> "Params":
        return Params(**{n: a.copy() for n, a in self.items()})

    def zeros_like(self) -> "Params":
        return Params(**{n: np.zeros_like(a) for n, a in self.items()})

    def real_views(self) -> list[np.ndarray]:
        """Float64 views (re, im interleaved) that alias the complex storage."""
        return [a.view(np.float64) for _, a in self.items()]

    def allclose(self, other: "Params", **kw) -> bool:
        return all(np.allclose(a, b, **kw) for (_, a), (_, b) in zip(self.items(), other.items()))

    def array_equal(self, other: "Params") -> bool:
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.items(), other.items()))


class ScoreBreakdown(NamedTuple):
    e1: float
    e2: float
    combined: float


def init_params(n_entities: int, n_predicates: int, n_timestamps: int, d: int, seed: int = 0) -> Params:
    """Gaussian(0, 0.01^2) real and imaginary parts; ``t_op`` starts at all ones."""
    if d < 2 or d % 2:
        raise ConfigError(f"embedding dimension must be a positive even number, got {d}")
    k = d // 2
    rng = np.random.default_rng(seed)

    def gauss(rows, cols):
        re = rng.normal(0.0, INIT_SCALE, size=(rows, cols))
        im = rng.normal(0.0, INIT_SCALE, size=(rows, cols))
        return re + 1j * im

    return Params(
        ent=gauss(n_entities, d),
        pred=gauss(n_predicates, d),
        pred_r=gauss(2 * n_predicates, d),
        time=gauss(n_timestamps, d),
        t_op=np.ones(d, dtype=np.complex128),
        ent_c=gauss(n_entities, k),
        pred_c=gauss(n_predicates, k),
    )


# -- kernels -------------------------------------------------------------------


def relation_vector(params: Params, p, t) -> np.ndarray:
    """``p * t + pr`` for predicate/time ids (scalars or arrays)."""
    return params.pred[p] * params.time[t] + params.pred_r[p]


def score_e1(params: Params, s: int, p: int, o: int, t: int) -> float:
    q = relation_vector(params, p, t)
    return float(np.real(np.sum(params.ent[s] * q * np.conj(params.ent[o]))))


def score_e2(params: Params, s: int, p: int, o: int) -> float:
    return float(np.real(np.sum(params.ent_c[s] * params.pred_c[p] * np.conj(params.ent_c[o]))))


def predict_score(params: Params, s: int, p: int, o: int, t: int, lam: float = 1.0, ablate_tis: bool = False) -> ScoreBreakdown:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if ablate_tis:
        lam = 0.0
    e1 = score_e1(params, s, p, o, t)
    e2 = score_e2(params, s, p, o)
    return ScoreBreakdown(e1, e2, e1 + lam * e2)


def object_scores(params: Params, s, p, t, lam: float = 1.0) -> np.ndarray:
    """Scores of ``(s, p, e, t)`` for every entity ``e``; shape (batch, |E|)."""
    s, p, t = np.atleast_1d(s), np.atleast_1d(p), np.atleast_1d(t)
    lhs = params.ent[s] * relation_vector(params, p, t)
    out = np.real(lhs @ np.conj(params.ent).T)
    if lam:
        out = out + lam * np.real((params.ent_c[s] * params.pred_c[p]) @ np.conj(params.ent_c).T)
    return out


def subject_scores(params: Params, p, o, t, lam: float = 1.0) -> np.ndarray:
    """Scores of ``(e, p, o, t)`` for every entity ``e``; shape (batch, |E|)."""
    p, o, t = np.atleast_1d(p), np.atleast_1d(o), np.atleast_1d(t)
    rhs = relation_vector(params, p, t) * np.conj(params.ent[o])
    out = np.real(rhs @ params.ent.T)
    if lam:
        out = out + lam * np.real((params.pred_c[p] * np.conj(params.ent_c[o])) @ params.ent_c.T)
    return out


def n3_norm(x) -> float:
    return float(np.sum(np.abs(np.asarray(x)) ** 3))


# -- rule penalties ------------------------------------------------------------


def rgpr_residual(params: Params, rule) -> np.ndarray:
    T = params.t_op
    pr = params.pred_r
    pat = rule.pattern
    if pat == "P1":
        return T * pr[rule.body[0]] - pr[rule.head]
    if pat == "P2":
        return pr[rule.body[0]] - pr[rule.head]
    a, b, c = pr[rule.body[0]], pr[rule.body[1]], pr[rule.head]
    if pat == "P3":
        return (T * T * a) * (T * b) - c
    if pat == "P4":
        return (T * a) * (T * b) - c
    if pat == "P5":
        return a * b - c
    raise ValueError(f"unknown pattern {pat!r}")


def rgpr_penalty(params: Params, rule) -> float:
    r = rgpr_residual(params, rule)
    return float(np.sum(r.real**2 + r.imag**2))


def rgpr_penalty_grad(params: Params, rule, weight: float, out: Params) -> float:
    """Add ``weight * d penalty`` into ``out`` and return the weighted penalty.

    Gradients follow the convention ``dL = Re(sum conj(g) * dz)``, i.e. the
    real part holds dL/dRe and the imaginary part dL/dIm.
    """
    T = params.t_op
    pr = params.pred_r
    r = rgpr_residual(params, rule)
    g = 2.0 * weight * r
    pat = rule.pattern
    if pat == "P1":
        a = pr[rule.body[0]]
        out.t_op += g * np.conj(a)
        out.pred_r[rule.body[0]] += g * np.conj(T)
        out.pred_r[rule.head] -= g
    elif pat == "P2":
        out.pred_r[rule.body[0]] += g
        out.pred_r[rule.head] -= g
    else:
        i, j = rule.body
        a, b = pr[i], pr[j]
        if pat == "P3":
            power = 3
        elif pat == "P4":
            power = 2
        else:
            power = 0
        Tp = T**power if power else np.ones_like(T)
        if power:
            out.t_op += g * np.conj(power * T ** (power - 1) * a * b)
        out.pred_r[i] += g * np.conj(Tp * b)
        out.pred_r[j] += g * np.conj(Tp * a)
        out.pred_r[rule.head] -= g
    return weight * float(np.sum(r.real**2 + r.imag**2))


# -- checkpoints -----------------------------------------------------------------


def _write_blocks(f, arrays):
    for a in arrays:
        f.write(np.ascontiguousarray(a.real, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(a.imag, dtype="<f8").tobytes())


def _read_blocks(buf: memoryview, offset: int, shapes):
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        re = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        im = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        arrays.append((re + 1j * im).astype(np.complex128))
    return arrays, offset


def _shapes(meta: dict) -> list[tuple[int, ...]]:
    E, P, T = int(meta["n_entities"]), int(meta["n_predicates"]), int(meta["n_timestamps"])
    d, k = int(meta["d"]), int(meta["k"])
    return [(E, d), (P, d), (2 * P, d), (T, d), (d,), (E, k), (P, k)]


def save_checkpoint(path: str | Path, params: Params, meta: dict | None = None, adam=None) -> None:
    """Binary checkpoint: magic, ``key=value`` header, then float64 LE blocks.

    Each tensor is written as its real parts followed by its imaginary parts,
    row-major, in the order ent, pred, pred_r, time, t_op, ent_c, pred_c.  When
    ``adam`` is given its first and second moments follow in the same layout.
    """
    header = {
        "n_entities": params.n_entities,
        "n_predicates": params.n_predicates,
        "n_timestamps": params.n_timestamps,
        "d": params.d,
        "k": params.k,
    }
    header.update(meta or {})
    if adam is not None:
        header["adam"] = 1
        header["adam_step"] = adam.step
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + b"\n")
        for key, value in header.items():
            f.write(f"{key}={value}\n".encode())
        f.write(b"end\n")
        _write_blocks(f, [a for _, a in params.items()])
        if adam is not None:
            _write_blocks(f, [a for _, a in adam.m.items()])
            _write_blocks(f, [a for _, a in adam.v.items()])
    tmp.replace(path)


def _parse_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_checkpoint(path: str | Path):
    """Return ``(params, meta, adam_moments)``; ``adam_moments`` is ``None`` or ``(m, v, step)``."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC + b"\n"):
        raise ValueError(f"{path}: not an LCGE checkpoint")
    end = data.index(b"\nend\n") + len(b"\nend\n")
    meta = {}
    for line in data[len(MAGIC) + 1 : end - len(b"end\n")].decode().splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = _parse_value(value)
    buf = memoryview(data)
    shapes = _shapes(meta)
    arrays, offset = _read_blocks(buf, end, shapes)
    params = Params(*arrays)
    adam = None
    if meta.get("adam"):
        m, offset = _read_blocks(buf, offset, shapes)
        v, offset = _read_blocks(buf, offset, shapes)
        adam = (Params(*m), Params(*v), int(meta["adam_step"]))
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing data in checkpoint")
    return params, meta, adam
