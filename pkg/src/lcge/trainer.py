"""Objective, exact gradients, Adam and the training loop.

Per event the objective is ``L1 + lam * L2`` where each term is a two-sided
full-softmax negative log-likelihood (subject and object replacement over every
entity) plus weighted N3 norms.  Rule penalties ``mu * sum_r sc(r) * G_r`` are
added once per optimisation step.

Complex parameters are treated as pairs of real coordinates.  A gradient array
stores ``dL/dRe + 1j * dL/dIm``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Tkg
from .scoring import (
    ConfigError,
    Params,
    init_params,
    load_checkpoint,
    rgpr_penalty_grad,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    d: int = 100
    lr: float = 0.1
    batch_size: int = 1024
    epochs: int = 20
    alpha1: float = 0.01
    alpha2: float = 0.01
    lam: float = 0.5
    mu: float = 1.0
    ablate_rgpr: bool = False
    ablate_tis: bool = False
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    deterministic: bool = True
    eval_batch_size: int = 512

    def errors(self) -> list[str]:
        out = []
        if self.d < 2 or self.d % 2:
            out.append(f"d must be a positive even number (got {self.d})")
        if not self.lr > 0:
            out.append(f"lr must be > 0 (got {self.lr})")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 0:
            out.append(f"epochs must be >= 0 (got {self.epochs})")
        for name in ("alpha1", "alpha2", "lam", "mu"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            out.append("eps must be > 0")
        return out

    def validate(self) -> "TrainConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.ablate_tis else self.lam

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(value, known[key].type)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value, typ):
    if not isinstance(value, str):
        return value
    if typ in ("bool", bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in ("int", int):
        return int(value)
    if typ in ("float", float):
        return float(value)
    return value


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (x.strip() for x in line.split("=", 1))
        out[key] = value
    return out


# -- loss terms ------------------------------------------------------------------


def _batch_arrays(batch) -> tuple[np.ndarray, ...]:
    arr = np.asarray(batch, dtype=np.int64).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def _softmax_nll(scores: np.ndarray, truth: np.ndarray, want_grad: bool):
    """Sum of ``logsumexp(row) - row[truth]`` and its gradient wrt ``scores``."""
    m = scores.max(axis=1, keepdims=True)
    ex = np.exp(scores - m)
    z = ex.sum(axis=1, keepdims=True)
    rows = np.arange(len(truth))
    loss = float(np.sum(np.log(z[:, 0]) + m[:, 0] - scores[rows, truth]))
    if not want_grad:
        return loss, None
    g = ex / z
    g[rows, truth] -= 1.0
    return loss, g


def _n3(z: np.ndarray) -> float:
    return float(np.sum(np.abs(z) ** 3))


def _n3_grad(z: np.ndarray) -> np.ndarray:
    return 3.0 * np.abs(z) * z


def _bilinear_nll(
    ent: np.ndarray,
    s: np.ndarray,
    o: np.ndarray,
    rel: np.ndarray,
    want_grad: bool,
):
    """Two-sided softmax NLL for ``Re(sum ent[s] * rel * conj(ent[o]))``.

    Returns ``(loss, grad_ent, grad_rel)`` with ``grad_ent`` full-sized.
    """
    S, O = ent[s], ent[o]
    v = S * rel
    w = rel * np.conj(O)
    obj_scores = np.real(v @ np.conj(ent).T)
    sub_scores = np.real(w @ ent.T)
    lo, go = _softmax_nll(obj_scores, o, want_grad)
    ls, gs = _softmax_nll(sub_scores, s, want_grad)
    if not want_grad:
        return lo + ls, None, None
    g_ent = go.T @ v + gs.T @ np.conj(w)
    g_v = go @ ent
    g_w = gs @ np.conj(ent)
    g_S = g_v * np.conj(rel)
    g_O = np.conj(g_w) * rel
    g_rel = g_v * np.conj(S) + g_w * O
    np.add.at(g_ent, s, g_S)
    np.add.at(g_ent, o, g_O)
    return lo + ls, g_ent, g_rel


def _l1(params: Params, s, p, o, t, alpha1: float, grad: Params | None, scale: float = 1.0) -> float:
    P, Tm, R = params.pred[p], params.time[t], params.pred_r[p]
    pt = P * Tm
    rel = pt + R
    want = grad is not None
    nll, g_ent, g_rel = _bilinear_nll(params.ent, s, o, rel, want)
    S, O = params.ent[s], params.ent[o]
    reg = _n3(S) + _n3(pt) + _n3(R) + _n3(O)
    if want:
        a = scale * alpha1
        g_ent = scale * g_ent
        np.add.at(g_ent, s, a * _n3_grad(S))
        np.add.at(g_ent, o, a * _n3_grad(O))
        grad.ent += g_ent
        g_rel = scale * g_rel
        g_pt = g_rel + a * _n3_grad(pt)
        np.add.at(grad.pred, p, g_pt * np.conj(Tm))
        np.add.at(grad.time, t, g_pt * np.conj(P))
        np.add.at(grad.pred_r, p, g_rel + a * _n3_grad(R))
    return nll + alpha1 * reg


def _l2(params: Params, s, p, o, alpha2: float, grad: Params | None, scale: float = 1.0) -> float:
    rel = params.pred_c[p]
    want = grad is not None
    nll, g_ent, g_rel = _bilinear_nll(params.ent_c, s, o, rel, want)
    S, O = params.ent_c[s], params.ent_c[o]
    reg = _n3(S) + _n3(rel) + _n3(O)
    if want:
        a = scale * alpha2
        g_ent = scale * g_ent
        np.add.at(g_ent, s, a * _n3_grad(S))
        np.add.at(g_ent, o, a * _n3_grad(O))
        grad.ent_c += g_ent
        np.add.at(grad.pred_c, p, scale * g_rel + a * _n3_grad(rel))
    return nll + alpha2 * reg


def loss_l1(params: Params, batch, alpha1: float) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    s, p, o, t = _batch_arrays(batch)
    return _l1(params, s, p, o, t, alpha1, None)


def loss_l2(params: Params, batch, alpha2: float) -> float:
    if len(batch) == 0:
        raise ValueError("empty batch")
    s, p, o, _ = _batch_arrays(batch)
    return _l2(params, s, p, o, alpha2, None)


def rule_term(params: Params, rules: Sequence, mu: float, ablate_rgpr: bool = False, grad: Params | None = None) -> float:
    if ablate_rgpr or not rules or mu == 0:
        return 0.0
    sink = grad if grad is not None else params.zeros_like()
    total = 0.0
    for r in rules:
        weight = mu * (r.sc if r.sc is not None else 1.0)
        total += rgpr_penalty_grad(params, r, weight, sink)
    return total


def loss_and_grad(params: Params, batch, rules: Sequence, cfg: TrainConfig, want_grad: bool = True):
    grad = params.zeros_like() if want_grad else None
    total = 0.0
    if len(batch):
        s, p, o, t = _batch_arrays(batch)
        total += _l1(params, s, p, o, t, cfg.alpha1, grad)
        lam = cfg.effective_lam
        if lam:
            total += lam * _l2(params, s, p, o, cfg.alpha2, grad, scale=lam)
    if want_grad:
        total += rule_term(params, rules, cfg.mu, cfg.ablate_rgpr, grad)
    else:
        total += rule_term(params, rules, cfg.mu, cfg.ablate_rgpr)
    return total, grad


def total_loss(params: Params, batch, rules: Sequence, cfg: TrainConfig) -> float:
    return loss_and_grad(params, batch, rules, cfg, want_grad=False)[0]


def grad(params: Params, batch, rules: Sequence, cfg: TrainConfig) -> Params:
    return loss_and_grad(params, batch, rules, cfg)[1]


# -- Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros(cls, params: Params) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: Params, g: Params, state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction on the real coordinates."""
    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            bad = int(np.sum(~np.isfinite(arr)))
            raise FloatingPointError(f"non-finite gradient in '{name}' ({bad} entries) at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for x, gx, m, v in zip(params.real_views(), g.real_views(), state.m.real_views(), state.v.real_views()):
        m *= b1
        m += (1.0 - b1) * gx
        v *= b2
        v += (1.0 - b2) * gx * gx
        x -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# -- training loop -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_mrr: float | None
    seconds: float

    def line(self) -> str:
        mrr = "nan" if self.val_mrr is None else f"{self.val_mrr:.6f}"
        return f"{self.epoch}\t{self.loss:.6f}\t{mrr}\t{self.seconds:.3f}"


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def val_mrr(self) -> list[float | None]:
        return [e.val_mrr for e in self.epochs]

    def __len__(self) -> int:
        return len(self.epochs)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch) so runs can resume."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def run_epoch(params: Params, events: np.ndarray, rules, cfg: TrainConfig, state: AdamState, epoch: int) -> float:
    order = epoch_order(len(events), cfg.seed, epoch)
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        batch = events[order[start : start + cfg.batch_size]]
        loss, g = loss_and_grad(params, batch, rules, cfg)
        adam_step(params, g, state, cfg)
        total += loss
    return total


def train(
    tkg: Tkg,
    rules: Sequence,
    cfg: TrainConfig,
    validate: Callable[[Params], float] | None = None,
    checkpoint_dir: str | Path | None = None,
    resume: bool = False,
    n_entities: int | None = None,
    n_predicates: int | None = None,
    n_timestamps: int | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[Params, TrainHistory]:
    """Train on the (non-augmented) events of ``tkg``.

    ``validate`` maps parameters to a validation MRR; when given, the returned
    parameters are those of the best validation epoch.  With ``checkpoint_dir``
    the latest state is written to ``last.ckpt`` after every epoch (including
    Adam moments) and the best parameters to ``best.ckpt``.
    """
    cfg.validate()
    if tkg.inverse_augmented:
        raise ValueError("train on the plain graph; inverse predicates are only used for mining")
    E = n_entities or tkg.n_entities
    P = n_predicates or tkg.n_predicates
    T = n_timestamps or tkg.n_timestamps
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)

    history = TrainHistory()
    start_epoch = 0
    best_mrr = -np.inf
    best = None
    params = state = None
    if resume:
        if ckdir is None or not (ckdir / "last.ckpt").exists():
            raise FileNotFoundError("resume requested but no last.ckpt found")
        params, meta, adam = load_checkpoint(ckdir / "last.ckpt")
        m, v, step = adam
        state = AdamState(m, v, step)
        start_epoch = int(meta["epoch"]) + 1
        if "best_mrr" in meta and (ckdir / "best.ckpt").exists():
            best_mrr = float(meta["best_mrr"])
            best = load_checkpoint(ckdir / "best.ckpt")[0]
            history.best_epoch = int(meta.get("best_epoch", -1))
    if params is None:
        params = init_params(E, P, T, cfg.d, cfg.seed)
        state = AdamState.zeros(params)

    events = tkg.as_array()
    rules = list(rules)
    for epoch in range(start_epoch, cfg.epochs):
        tic = time.perf_counter()
        loss = run_epoch(params, events, rules, cfg, state, epoch)
        mrr = validate(params) if validate is not None else None
        rec = EpochRecord(epoch, loss, mrr, time.perf_counter() - tic)
        history.epochs.append(rec)
        log.info("epoch %s", rec.line())
        if on_epoch is not None:
            on_epoch(rec)
        if mrr is not None and mrr > best_mrr:
            best_mrr, best = mrr, params.copy()
            history.best_epoch = epoch
            if ckdir is not None:
                save_checkpoint(ckdir / "best.ckpt", best, _meta(cfg, state, epoch))
        if ckdir is not None:
            meta = _meta(cfg, state, epoch)
            if best is not None:
                meta.update(best_mrr=repr(float(best_mrr)), best_epoch=history.best_epoch)
            save_checkpoint(ckdir / "last.ckpt", params, meta, adam=state)
    if best is not None:
        return best, history
    return params, history


def _meta(cfg: TrainConfig, state: AdamState, epoch: int) -> dict:
    return {
        "lam": repr(float(cfg.lam)),
        "ablate_tis": int(cfg.ablate_tis),
        "ablate_rgpr": int(cfg.ablate_rgpr),
        "seed": cfg.seed,
        "step": state.step,
        "epoch": epoch,
    }
