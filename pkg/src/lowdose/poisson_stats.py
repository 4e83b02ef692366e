"""Scalar Poisson utilities: log-space pmf, reproducible sampling, certified series.

The sampler intentionally avoids numpy's built-in Poisson generator: draws use
inversion by sequential search for small means and Hormann's PTRS transformed
rejection for large ones, consuming uniforms from a caller-supplied Generator.
A fixed seed therefore pins every draw to the documented algorithm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "PoissonDist",
    "SeriesTolerance",
    "TruncationFailure",
    "log_pmf",
    "pmf",
    "sample",
    "expect",
]

_INVERSION_CUTOFF = 10.0


class TruncationFailure(RuntimeError):
    """Certified series tail could not be driven below tail_bound in max_terms."""


@dataclass(frozen=True)
class PoissonDist:
    """Poisson distribution with mean ``mu >= 0``."""

    mu: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.mu) or self.mu < 0:
            raise ValueError(f"Poisson mean must be finite and nonnegative, got {self.mu!r}")


@dataclass(frozen=True)
class SeriesTolerance:
    """Stopping rule for truncated Poisson sums.

    ``tail_bound`` is an absolute bound on the certified contribution of the
    discarded tail; ``max_terms`` caps how many terms may be summed before
    giving up with :class:`TruncationFailure`.
    """

    tail_bound: float = 1e-12
    max_terms: int = 100_000

    def __post_init__(self) -> None:
        if not (self.tail_bound > 0):
            raise ValueError("tail_bound must be positive")
        if self.max_terms < 1:
            raise ValueError("max_terms must be at least 1")


def log_pmf(dist: PoissonDist, k: int) -> float:
    """Return ``log P(y = k)``, computed in log space."""
    if k < 0:
        return -math.inf
    mu = dist.mu
    if mu == 0.0:
        return 0.0 if k == 0 else -math.inf
    return k * math.log(mu) - mu - math.lgamma(k + 1)


def pmf(dist: PoissonDist, k: int) -> float:
    """Return ``P(y = k)``."""
    return math.exp(log_pmf(dist, k))


def sample(dist: PoissonDist, rng: np.random.Generator) -> int:
    """Draw a single Poisson variate using ``rng`` as the uniform source.

    Means up to 10 use inversion by sequential search; larger means use the
    PTRS transformed-rejection scheme. Only ``rng.random()`` is consumed, so
    identical seeds give identical draws on any platform.
    """
    mu = dist.mu
    if mu == 0.0:
        return 0
    if mu <= _INVERSION_CUTOFF:
        return _sample_inversion(mu, rng)
    return _sample_ptrs(mu, rng)


def _sample_inversion(mu: float, rng: np.random.Generator) -> int:
    u = rng.random()
    p = math.exp(-mu)
    cdf = p
    k = 0
    while u > cdf:
        k += 1
        p *= mu / k
        cdf += p
        if p == 0.0:  # underflow: remaining tail is below the resolution of u
            break
    return k


def _sample_ptrs(mu: float, rng: np.random.Generator) -> int:
    # Hormann (1993) PTRS, valid for mu >= 10.
    b = 0.931 + 2.53 * math.sqrt(mu)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_mu = math.log(mu)
    while True:
        u = rng.random() - 0.5
        v = rng.random()
        us = 0.5 - abs(u)
        k = math.floor((2.0 * a / us + b) * u + mu + 0.43)
        if us >= 0.07 and v <= v_r:
            return int(k)
        if k < 0 or (us < 0.013 and v > us):
            continue
        if math.log(v) + math.log(inv_alpha) - math.log(a / (us * us) + b) <= (
            k * log_mu - mu - math.lgamma(k + 1)
        ):
            return int(k)


def expect(
    dist: PoissonDist,
    f: Callable[[int], float],
    growth_constant: float,
    tol: SeriesTolerance | None = None,
) -> float:
    """Return ``E[f(y)]`` by truncated summation with a certified error bound.

    The caller certifies ``|f(k)| <= growth_constant * k**2`` for all k >= 1
    (quadratic growth). After summing through k the discarded tail satisfies

        |sum_{j>k} f(j) P(y=j)| <= growth_constant * E[y^2; y > k]
                                 <= growth_constant * sqrt(E[y^4] Pr(y > k))

    with the Chernoff bound ``Pr(y > k) <= exp(-mu) (e mu/(k+1))**(k+1)``.
    Summation stops once this bound drops below ``tol.tail_bound``, so the
    returned value differs from the infinite series by less than that.
    """
    if tol is None:
        tol = SeriesTolerance()
    if not math.isfinite(growth_constant) or growth_constant < 0:
        raise ValueError("growth_constant must be finite and nonnegative")
    mu = dist.mu
    if mu == 0.0:
        return float(f(0))

    m4 = mu + 7.0 * mu**2 + 6.0 * mu**3 + mu**4  # E[y^4]
    log_c = math.log(growth_constant) if growth_constant > 0 else -math.inf
    half_log_m4 = 0.5 * math.log(m4)
    log_mu = math.log(mu)
    log_target = math.log(tol.tail_bound)

    total = 0.0
    for k in range(tol.max_terms + 1):
        total += f(k) * math.exp(k * log_mu - mu - math.lgamma(k + 1))
        kp1 = k + 1
        if kp1 <= mu:
            continue  # Chernoff exponent only decays past the mean
        log_tail = -mu + kp1 * (1.0 + log_mu - math.log(kp1))
        if log_c + half_log_m4 + 0.5 * log_tail < log_target:
            return total
    raise TruncationFailure(
        f"tail bound not below {tol.tail_bound:g} after {tol.max_terms} terms (mu={mu:g})"
    )
