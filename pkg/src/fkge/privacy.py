"""Laplace noisy-argmax voting and a moments accountant for it.

The ledger keeps one accumulator per moment order ``l = 1..L``. Each noisy
vote with counts ``(n0, n1)`` adds

    min(2 lam^2 l (l+1),
        log((1-q) ((1-q) / (1 - e^{2 lam} q))^l + q e^{2 lam l}))

with ``q = (2 + lam |n0-n1|) / (4 exp(lam |n0-n1|))``, and the privacy bound
is ``eps_hat = min_l (alpha(l) + log(1/delta)) / l``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class VoteRecord:
    n0: int
    n1: int
    label: int

    @property
    def gap(self) -> int:
        return abs(self.n0 - self.n1)


@dataclass
class PrivacyLedger:
    lam: float = 0.05
    delta: float = 1e-5
    max_moment: int = 32
    moments: np.ndarray = field(default=None)  # type: ignore[assignment]
    query_count: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.max_moment < 1:
            raise ValueError("need at least one moment")
        if self.moments is None:
            self.moments = np.zeros(self.max_moment)
        self.moments = np.asarray(self.moments, dtype=np.float64)
        if self.moments.shape != (self.max_moment,):
            raise ValueError("moments must have one entry per order")

    @property
    def orders(self) -> np.ndarray:
        return np.arange(1, self.max_moment + 1)

    @property
    def noise_scale(self) -> float:
        return 1.0 / self.lam

    def epsilon(self) -> float:
        return epsilon_hat(self)

    def snapshot(self) -> dict:
        return {
            "lambda": self.lam,
            "delta": self.delta,
            "max_moment": self.max_moment,
            "query_count": self.query_count,
            "alpha": self.moments.tolist(),
            "epsilon_hat": self.epsilon(),
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), sort_keys=True)

    @classmethod
    def from_snapshot(cls, d: dict) -> "PrivacyLedger":
        return cls(d["lambda"], d["delta"], d["max_moment"], np.asarray(d["alpha"]), d["query_count"])


# --------------------------------------------------------------------------- noise

def laplace_from_uniform(u, scale: float):
    """Inverse-CDF Laplace(0, scale) transform of uniform(0, 1) draws."""
    u = np.asarray(u, dtype=np.float64)
    c = u - 0.5
    return -scale * np.sign(c) * np.log1p(-2.0 * np.abs(c))


def laplace(scale: float, rng: np.random.Generator, size=None):
    if scale <= 0:
        raise ValueError("scale must be positive")
    out = laplace_from_uniform(rng.random(size), scale)
    return float(out) if size is None else out


def laplace_difference_cdf(z: float, scale: float) -> float:
    """P(V0 - V1 <= z) for i.i.d. Laplace(0, scale) variables."""
    a = abs(z) / scale
    tail = 0.5 * (1.0 + a / 2.0) * math.exp(-a)
    return 1.0 - tail if z >= 0 else tail


# --------------------------------------------------------------------------- accounting

def q_value(gap, lam: float):
    """Bound on the probability that the noisy argmax disagrees with the plurality."""
    gap = np.abs(np.asarray(gap, dtype=np.float64))
    return (2.0 + lam * gap) / (4.0 * np.exp(lam * gap))


def moment_increment(gap, lam: float, orders) -> np.ndarray:
    """Per-order increment to the accumulators for one vote with ``|n0-n1| = gap``.

    The data-dependent term is evaluated in log space; when ``e^{2 lam} q >= 1``
    or anything is non-finite, the data-independent term is used alone.
    """
    orders = np.asarray(orders, dtype=np.float64)
    q = float(q_value(gap, lam))
    indep = 2.0 * lam * lam * orders * (orders + 1.0)
    inner = math.exp(2.0 * lam) * q
    if not (0.0 < q < 1.0) or inner >= 1.0:
        return indep
    with np.errstate(all="ignore"):
        log_ratio = math.log1p(-q) - math.log1p(-inner)
        a = math.log1p(-q) + orders * log_ratio
        b = math.log(q) + 2.0 * lam * orders
        dep = np.logaddexp(a, b)
    return np.where(np.isfinite(dep), np.minimum(indep, dep), indep)


def record_query(ledger: PrivacyLedger, vote: VoteRecord) -> PrivacyLedger:
    ledger.moments = ledger.moments + moment_increment(vote.gap, ledger.lam, ledger.orders)
    ledger.query_count += 1
    return ledger


def record_queries(ledger: PrivacyLedger, gaps) -> PrivacyLedger:
    """Record many votes; same additions in the same order as ``record_query``."""
    gaps = np.asarray(gaps, dtype=np.int64)
    if not len(gaps):
        return ledger
    table = {int(g): moment_increment(int(g), ledger.lam, ledger.orders) for g in np.unique(gaps)}
    moments = ledger.moments.copy()
    for g in gaps:
        moments = moments + table[int(g)]
    ledger.moments = moments
    ledger.query_count += len(gaps)
    return ledger


def epsilon_hat(ledger: PrivacyLedger) -> float:
    orders = ledger.orders
    return float(np.min((ledger.moments + math.log(1.0 / ledger.delta)) / orders))


def best_order(ledger: PrivacyLedger) -> int:
    orders = ledger.orders
    return int(orders[np.argmin((ledger.moments + math.log(1.0 / ledger.delta)) / orders)])


# --------------------------------------------------------------------------- voting

def pate_vote(predictions, ledger: PrivacyLedger, rng: np.random.Generator,
              noise: tuple[float, float] | None = None) -> tuple[int, VoteRecord]:
    """Noisy argmax over binary teacher predictions.

    ``noise`` overrides the two Laplace draws (test hook). A tie after noise
    goes to label 1.
    """
    preds = np.asarray(predictions, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("need at least one teacher prediction")
    n1 = int(preds.sum())
    n0 = int(preds.size - n1)
    if noise is None:
        v0, v1 = laplace_from_uniform(rng.random(2), 1.0 / ledger.lam)
    else:
        v0, v1 = noise
    label = int(n1 + v1 >= n0 + v0)
    rec = VoteRecord(n0, n1, label)
    record_query(ledger, rec)
    return label, rec


def pate_vote_batch(votes: np.ndarray, ledger: PrivacyLedger, rng: np.random.Generator,
                    zero_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``pate_vote`` over samples.

    ``votes`` is ``(teachers, samples)`` of 0/1 predictions. Draws the same
    noise stream as calling ``pate_vote`` sample by sample. Returns
    ``(labels, n1_counts)``.
    """
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] == 0:
        raise ValueError("votes must be (teachers, samples) with at least one teacher")
    n_teachers, n = votes.shape
    n1 = votes.sum(axis=0)
    n0 = n_teachers - n1
    if zero_noise:
        noise = np.zeros((n, 2))
    else:
        noise = laplace_from_uniform(rng.random((n, 2)), 1.0 / ledger.lam)
    labels = (n1 + noise[:, 1] >= n0 + noise[:, 0]).astype(np.int64)
    record_queries(ledger, np.abs(n0 - n1))
    return labels, n1
