from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from lcge.data import Tkg
from lcge.scoring import Params
from lcge.trainer import TrainConfig

A, B, C = 0, 1, 2
Q1, Q2 = 0, 1

# q1(A,B,0) q1(B,C,0) q1(A,B,1) q2(A,B,1) q2(A,B,2)
MICRO_EVENTS = [(A, Q1, B, 0), (B, Q1, C, 0), (A, Q1, B, 1), (A, Q2, B, 1), (A, Q2, B, 2)]

MICRO_TRAIN = "A\tq1\tB\t2014-01-01\nB\tq1\tC\t2014-01-01\nA\tq1\tB\t2014-01-02\nA\tq2\tB\t2014-01-02\nA\tq2\tB\t2014-01-03\n"
MICRO_VALID = "B\tq2\tC\t2014-01-02\n"
MICRO_TEST = "A\tq2\tC\t2014-01-03\n"


@pytest.fixture
def micro_tkg() -> Tkg:
    return Tkg(MICRO_EVENTS, 3, 2, 3)


def write_micro(directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "train.txt").write_text(MICRO_TRAIN, encoding="utf-8")
    (directory / "valid.txt").write_text(MICRO_VALID, encoding="utf-8")
    (directory / "test.txt").write_text(MICRO_TEST, encoding="utf-8")
    return directory


@pytest.fixture
def micro_dir(tmp_path) -> Path:
    return write_micro(tmp_path / "micro")


def random_tkg(rng: np.random.Generator, max_e=50, max_p=8, max_t=20, max_events=400) -> Tkg:
    """Small random graph; pairs are drawn from a reduced pool so rules actually fire."""
    E = int(rng.integers(2, max_e + 1))
    P = int(rng.integers(1, max_p + 1))
    T = int(rng.integers(1, max_t + 1))
    n_pairs = int(rng.integers(1, max(2, E)))
    pool = rng.integers(0, E, size=(n_pairs, 2))
    n = int(rng.integers(1, max_events + 1))
    rows = pool[rng.integers(0, n_pairs, size=n)]
    p = rng.integers(0, P, size=n)
    t = rng.integers(0, T, size=n)
    events = np.column_stack([rows[:, 0], p, rows[:, 1], t])
    return Tkg(events.tolist(), E, P, T)


def random_params(rng: np.random.Generator, E=4, P=3, T=3, d=4, scale=0.5) -> Params:
    k = d // 2

    def c(*shape):
        return scale * (rng.normal(size=shape) + 1j * rng.normal(size=shape))

    return Params(c(E, d), c(P, d), c(2 * P, d), c(T, d), c(d), c(E, k), c(P, k))


def small_config(**kw) -> TrainConfig:
    base = dict(d=4, lr=0.05, batch_size=4, epochs=3, alpha1=0.01, alpha2=0.01, lam=0.5, mu=1.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def fd_relative_error(params: Params, batch, rules, cfg: TrainConfig, h: float = 1e-5) -> float:
    """Relative error between analytic and central-difference gradients over every real coordinate."""
    from lcge.trainer import grad, total_loss

    analytic = grad(params, batch, rules, cfg)
    num, ana = [], []
    for (name, arr), (_, g) in zip(params.items(), analytic.items()):
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            for unit, part in ((1.0, gflat[i].real), (1j, gflat[i].imag)):
                old = flat[i]
                flat[i] = old + h * unit
                up = total_loss(params, batch, rules, cfg)
                flat[i] = old - h * unit
                down = total_loss(params, batch, rules, cfg)
                flat[i] = old
                num.append((up - down) / (2 * h))
                ana.append(part)
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12))


def random_gradient_instance(rng: np.random.Generator):
    """Params, batch, rules and config for one finite-difference check (d <= 8, <= 5 entities)."""
    from lcge.rules import TemporalRule

    d = int(rng.choice([2, 4, 6, 8]))
    E, P, T = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    params = random_params(rng, E, P, T, d, scale=0.5)
    n = int(rng.integers(1, 5))
    batch = np.column_stack(
        [rng.integers(0, E, n), rng.integers(0, P, n), rng.integers(0, E, n), rng.integers(0, T, n)]
    )
    rules = []
    for pattern in ("P1", "P2", "P3", "P4", "P5"):
        n_body = 1 if pattern in ("P1", "P2") else 2
        preds = tuple(int(x) for x in rng.integers(0, 2 * P, n_body + 1))
        rules.append(TemporalRule(pattern, preds[-1], preds[:-1], 1.0, float(rng.uniform(0.1, 1)), 0.5))
    cfg = small_config(
        d=d,
        alpha1=float(rng.uniform(0, 0.1)),
        alpha2=float(rng.uniform(0, 0.1)),
        lam=float(rng.uniform(0, 1)),
        mu=float(rng.uniform(0.1, 2)),
    )
    return params, batch, rules, cfg
