"""Adaptive-attacker bypass probabilities: exact, approximate and simulated.

The attacker guesses ``m_A`` of ``N`` nodes and the verifier draws ``m_V``
uniformly; a bypass needs every verifier node inside the guess. That is a
hypergeometric all-successes event,

    C(N - m_V, m_A - m_V) / C(N, m_A) = prod_{i<m_V} (m_A - i) / (N - i),

which the power form ``(m_A / N) ** m_V`` over-estimates: it pretends the
draws are with replacement. With targets over ``c`` classes the attacker
must also guess each target, giving ``(m_A / (c N)) ** m_V``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .graph import Graph


def _check(N: int, m_A: int, m_V: int):
    for name, v in (("N", N), ("m_A", m_A), ("m_V", m_V)):
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
            raise TypeError(f"{name} must be an int")
    if not 0 <= m_V <= m_A <= N:
        raise ValueError(f"need 0 <= m_V <= m_A <= N, got N={N}, m_A={m_A}, m_V={m_V}")


def bypass_fraction(N: int, m_A: int, m_V: int) -> Fraction:
    _check(N, m_A, m_V)
    p = Fraction(1)
    for i in range(m_V):
        p *= Fraction(m_A - i, N - i)
    return p


def bypass_prob_exact(N: int, m_A: int, m_V: int) -> float:
    return float(bypass_fraction(N, m_A, m_V))


def bypass_prob_binomial(N: int, m_A: int, m_V: int) -> Fraction:
    """Big-integer reference: C(N - m_V, m_A - m_V) / C(N, m_A)."""
    _check(N, m_A, m_V)
    return Fraction(math.comb(N - m_V, m_A - m_V), math.comb(N, m_A))


def bypass_prob_approx(N: int, m_A: int, m_V: int, c: int = 1) -> float:
    _check(N, m_A, m_V)
    if c < 1:
        raise ValueError("c must be >= 1")
    if N == 0:
        return 1.0
    return float(Fraction(m_A, c * N) ** m_V)


@dataclass
class BypassEstimate:
    rate: float
    stderr: float
    hits: int
    trials: int
    setting: str
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _paired_hits(N: int, m_A: int, m_V: int, trials: int, seed: int, classes: int):
    rng = np.random.default_rng(seed)
    idx = np.broadcast_to(np.arange(N), (trials, N))
    att = rng.permuted(idx, axis=1)[:, :m_A]
    ver = rng.permuted(idx, axis=1)[:, :m_V]
    covered = np.zeros((trials, N), dtype=bool)
    np.put_along_axis(covered, att, True, axis=1)
    # the attacker's target guess for every node, the verifier's for its own
    att_t = rng.integers(classes, size=(trials, N))
    ver_t = rng.integers(classes, size=(trials, m_V))
    in_set = np.take_along_axis(covered, ver, axis=1)
    same_t = np.take_along_axis(att_t, ver, axis=1) == ver_t
    trans = in_set.all(axis=1)
    ind = (in_set & same_t).all(axis=1)
    return trans, ind


def _estimate(hits: np.ndarray, setting: str, seed: int) -> BypassEstimate:
    n = hits.size
    p = float(hits.mean())
    return BypassEstimate(p, math.sqrt(p * (1 - p) / n), int(hits.sum()), n, setting, seed)


def bypass_rate_paired(N, m_A: int, m_V: int, trials: int = 10_000, seed: int = 0,
                       classes: int | None = None) -> tuple:
    """Transductive and inductive estimates from one shared set of draws.

    Each inductive bypass needs the transductive containment event plus
    matching targets, so the inductive count never exceeds the other.
    """
    if isinstance(N, Graph):
        classes = N.num_classes if classes is None else classes
        N = N.num_nodes
    classes = 2 if classes is None else classes
    _check(N, m_A, m_V)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if classes < 1:
        raise ValueError("classes must be >= 1")
    trans, ind = _paired_hits(N, m_A, m_V, trials, seed, classes)
    return _estimate(trans, "transductive", seed), _estimate(ind, "inductive", seed)


def bypass_rate_monte_carlo(N, m_A: int, m_V: int, trials: int = 10_000, seed: int = 0,
                            setting: str = "transductive", classes: int | None = None) -> BypassEstimate:
    if setting not in ("transductive", "inductive"):
        raise ValueError(f"unknown setting {setting!r}")
    trans, ind = bypass_rate_paired(N, m_A, m_V, trials, seed, classes)
    return trans if setting == "transductive" else ind
