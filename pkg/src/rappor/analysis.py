"""Learning limits and attacker-inference quantities.

The limit calculations follow the one-bit-per-category, f = 0 setting with
p fixed at 0.5 by default, which upper-bounds what any Bloom-filter
configuration can learn. The attacker posterior ignores Bloom collisions
from other strings onto the target's bits; collisions only help the client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rappor.numerics import inv_norm_cdf
from rappor.params import Params, response_probabilities


def _check_limit_query(q: float, N: float, M: int, alpha: float, p: float = 0.5) -> None:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not p < q <= 1.0:
        raise ValueError(f"need {p} < q <= 1")
    if M < 1:
        raise ValueError("M must be >= 1")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if alpha / M >= 0.5:
        # critical value would be <= 0: every estimate "passes"
        raise ValueError("alpha / M must be below 0.5")


def estimator_variance(p: float, q: float, N: float) -> float:
    """Variance of the one-bit count estimator when the bit is never truly set."""
    if not p < q:
        raise ValueError("need p < q")
    return p * (1.0 - p) * N / (q - p) ** 2


def critical_value(M: int, alpha: float) -> float:
    """Bonferroni-corrected one-sided normal critical value."""
    return float(inv_norm_cdf(1.0 - alpha / M))


def detection_threshold(q: float, N: float, M: int, alpha: float = 0.05, p: float = 0.5) -> float:
    """Smallest true count whose estimate clears the critical value.

    With the default p = 0.5 this is Q sqrt(N) / (2q - 1).
    """
    _check_limit_query(q, N, M, alpha, p)
    return critical_value(M, alpha) * math.sqrt(estimator_variance(p, q, N))


def max_learnable_real(q: float, N: float, M: int, alpha: float = 0.05, p: float = 0.5) -> float:
    # uniform mass over x strings: N / x must reach the detection threshold
    return N / detection_threshold(q, N, M, alpha, p)


def max_learnable_strings(q: float, N: float, M: int, alpha: float = 0.05) -> int:
    return math.floor(max_learnable_real(q, N, M, alpha))


@dataclass(frozen=True)
class AttackerQuery:
    f_v: float
    params: Params
    observed_signal_bits: int

    def __post_init__(self):
        if not 0.0 <= self.f_v <= 1.0:
            raise ValueError("f_v must lie in [0, 1]")
        if not 0 <= self.observed_signal_bits <= self.params.h:
            raise ValueError("observed_signal_bits must lie in [0, h]")


def attacker_posterior(query: AttackerQuery) -> float:
    """P(client reported v | s of v's h bits are set in its report)."""
    params, s = query.params, query.observed_signal_bits
    q_star, p_star = response_probabilities(params.f, params.p, params.q)
    h = params.h
    like_v = q_star ** s * (1.0 - q_star) ** (h - s)
    like_other = p_star ** s * (1.0 - p_star) ** (h - s)
    num = query.f_v * like_v
    den = num + (1.0 - query.f_v) * like_other
    if den == 0.0:
        return float("nan")
    return num / den


def attacker_target_fdr(f_v: float, params: Params) -> float:
    """Share of clients with all of v's bits set who did not report v."""
    return 1.0 - attacker_posterior(AttackerQuery(f_v, params, params.h))


def posterior_crossover(params: Params, s: int | None = None) -> float:
    """Prior f_v at which the posterior for ``s`` set bits equals 1/2."""
    s = params.h if s is None else s
    q_star, p_star = response_probabilities(params.f, params.p, params.q)
    h = params.h
    like_v = q_star ** s * (1.0 - q_star) ** (h - s)
    like_other = p_star ** s * (1.0 - p_star) ** (h - s)
    return like_other / (like_v + like_other)


def silent_client_probability(h: int, f: float) -> float:
    """Chance that permanent noise zeroes every one of the client's signal bits."""
    if not 0.0 <= f <= 1.0:
        raise ValueError("f must lie in [0, 1]")
    if h < 1:
        raise ValueError("h must be >= 1")
    return (0.5 * f) ** h


def parse_sweep(spec: str) -> tuple[str, np.ndarray]:
    """``name=start:stop:count`` -> (name, linspace)."""
    try:
        name, rng = spec.split("=", 1)
        start, stop, count = rng.split(":")
        return name.strip(), np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise ValueError(f"sweep must look like name=start:stop:count, got {spec!r}") from None
