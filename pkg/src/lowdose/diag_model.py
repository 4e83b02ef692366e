"""Sequence-space count model with per-mode closed-form estimators.

Observed counts are ``y_j ~ Poisson(s * a_j * x_j)`` for modes ``j < d`` with
positive gains ``a_j`` and dose ``s``; modes ``d <= j < m`` are unobserved and
contribute their squared signal energy as an irreducible truncation bias.
Four per-mode estimators are provided in closed form, together with exact
mean-squared-error evaluation by certified Poisson series and the matching
low-count risk-ratio predictions.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .poisson_stats import PoissonDist, SeriesTolerance, expect

__all__ = [
    "EstimatorFamily",
    "EstimatorSpec",
    "DiagonalProblem",
    "ModeMSEReport",
    "UnsupportedFamily",
    "DegenerateWeights",
    "InvalidDecay",
    "estimate_mode",
    "hg_shrinkage_constant",
    "exact_mode_mse",
    "global_mse",
    "predicted_ratio",
    "global_ratio_prediction",
    "polynomial_problem",
    "optimal_resolution",
]


class UnsupportedFamily(ValueError):
    """Operation is undefined for the requested estimator family."""


class DegenerateWeights(ValueError):
    """All averaging weights vanished (zero observed signal)."""


class InvalidDecay(ValueError):
    """Polynomial decay exponents outside the admissible range."""


class EstimatorFamily(enum.Enum):
    POISSON_MLE = "poisson_mle"
    POISSON_MAP = "poisson_map"
    HOMOSCEDASTIC_MAP = "homoscedastic_map"
    HETEROSCEDASTIC_HG = "heteroscedastic_hg"


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator family plus its hyperparameters.

    ``tau`` is the quadratic penalty weight (MAP families), ``epsilon`` the
    variance-floor offset (heteroscedastic family). Unused fields stay 0.
    """

    family: EstimatorFamily
    tau: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.family in (EstimatorFamily.POISSON_MAP, EstimatorFamily.HOMOSCEDASTIC_MAP):
            if not (self.tau > 0):
                raise ValueError(f"{self.family.value} requires tau > 0, got {self.tau!r}")
        if self.family is EstimatorFamily.HETEROSCEDASTIC_HG:
            if not (self.epsilon > 0):
                raise ValueError(f"heteroscedastic_hg requires epsilon > 0, got {self.epsilon!r}")

    @classmethod
    def poisson_mle(cls) -> "EstimatorSpec":
        return cls(EstimatorFamily.POISSON_MLE)

    @classmethod
    def poisson_map(cls, tau: float) -> "EstimatorSpec":
        return cls(EstimatorFamily.POISSON_MAP, tau=tau)

    @classmethod
    def homoscedastic_map(cls, tau: float) -> "EstimatorSpec":
        return cls(EstimatorFamily.HOMOSCEDASTIC_MAP, tau=tau)

    @classmethod
    def heteroscedastic_hg(cls, epsilon: float) -> "EstimatorSpec":
        return cls(EstimatorFamily.HETEROSCEDASTIC_HG, epsilon=epsilon)


@dataclass(frozen=True, eq=False)
class DiagonalProblem:
    """Diagonal count model: gains for the d observed modes, full signal, dose.

    ``gains`` has length d (all positive); ``x_star`` has length m >= d and
    holds the ground-truth coefficients, the last m - d of which are never
    observed.
    """

    gains: np.ndarray
    x_star: np.ndarray
    dose: float

    def __post_init__(self) -> None:
        gains = np.asarray(self.gains, dtype=float)
        x_star = np.asarray(self.x_star, dtype=float)
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "x_star", x_star)
        if gains.ndim != 1 or x_star.ndim != 1:
            raise ValueError("gains and x_star must be one-dimensional")
        if gains.size < 1:
            raise ValueError("need at least one observed mode")
        if x_star.size < gains.size:
            raise ValueError("x_star must cover every observed mode (m >= d)")
        if not np.all(gains > 0):
            raise ValueError("all gains must be positive")
        if not (self.dose > 0 and math.isfinite(self.dose)):
            raise ValueError(f"dose must be positive and finite, got {self.dose!r}")

    @property
    def d(self) -> int:
        """Number of observed modes."""
        return int(self.gains.size)

    @property
    def m(self) -> int:
        """Total number of signal modes."""
        return int(self.x_star.size)

    def mode_means(self) -> np.ndarray:
        """Expected counts ``mu_j = s * a_j * x_j`` for the observed modes."""
        return self.dose * self.gains * self.x_star[: self.d]


@dataclass(frozen=True, eq=False)
class ModeMSEReport:
    """Exact risk decomposition for one estimator on one problem."""

    per_mode_mse: np.ndarray
    truncation_bias: float
    total: float
    gamma: np.ndarray  # tau / (s a_j)^2 for MAP families, empty otherwise


def estimate_mode(spec: EstimatorSpec, s: float, a: float, y: float) -> float:
    """Closed-form per-mode estimate from a single count ``y``.

    All four families return a value in ``[0, y/(s a)]`` (clamped shrinkage of
    the unbiased estimate).
    """
    if not (s > 0 and a > 0):
        raise ValueError("dose and gain must be positive")
    if y < 0:
        raise ValueError("counts are nonnegative")
    sa = s * a
    fam = spec.family
    if fam is EstimatorFamily.POISSON_MLE:
        return y / sa
    if fam is EstimatorFamily.POISSON_MAP:
        return (-sa + math.sqrt(sa * sa + 4.0 * spec.tau * y)) / (2.0 * spec.tau)
    if fam is EstimatorFamily.HOMOSCEDASTIC_MAP:
        return max(sa / (sa * sa + spec.tau) * y, 0.0)
    if fam is EstimatorFamily.HETEROSCEDASTIC_HG:
        q = y + spec.epsilon
        mu_hat = (-1.0 + math.sqrt(1.0 + 4.0 * q * q)) / 2.0 - spec.epsilon
        return max(mu_hat / sa, 0.0)
    raise UnsupportedFamily(f"unknown family {fam!r}")


def hg_shrinkage_constant(epsilon: float) -> float:
    """Shrinkage factor applied to a unit count by the heteroscedastic rule.

    Equals the estimate at ``y = 1`` with unit gain and dose. Strictly between
    1/2 and (sqrt(5)-1)/2, decreasing in epsilon, and bounded above by
    ``1/2 + 1/(8 (1 + epsilon))``.
    """
    if not (epsilon > 0):
        raise ValueError("epsilon must be positive")
    q = 1.0 + epsilon
    return (-1.0 + math.sqrt(1.0 + 4.0 * q * q)) / 2.0 - epsilon


def _growth_constant(sa: float, x_true: float) -> float:
    # (xhat(k) - x)^2 <= 2 k^2/(sa)^2 + 2 x^2 <= C k^2 for k >= 1, since every
    # family is dominated by the unbiased estimate k/(sa).
    return 2.0 / (sa * sa) + 2.0 * x_true * x_true


def exact_mode_mse(
    spec: EstimatorSpec,
    problem: DiagonalProblem,
    j: int,
    tol: SeriesTolerance | None = None,
) -> float:
    """Exact mean-squared error of mode ``j`` (0-based, observed) by series.

    Evaluates ``E[(xhat(y) - x_j)^2]`` under ``y ~ Poisson(s a_j x_j)`` with a
    certified truncation bound.
    """
    if not (0 <= j < problem.d):
        raise IndexError(f"mode index {j} outside observed range [0, {problem.d})")
    s = problem.dose
    a = float(problem.gains[j])
    x_true = float(problem.x_star[j])
    mu = s * a * x_true
    if mu < 0:
        raise ValueError("negative mode mean; x_star must be nonnegative on observed modes")
    dist = PoissonDist(mu)

    def sq_err(k: int) -> float:
        diff = estimate_mode(spec, s, a, k) - x_true
        return diff * diff

    return expect(dist, sq_err, _growth_constant(s * a, x_true), tol)


def global_mse(
    spec: EstimatorSpec,
    problem: DiagonalProblem,
    tol: SeriesTolerance | None = None,
) -> ModeMSEReport:
    """Exact global risk: per-mode MSEs, truncation bias, and their total."""
    per_mode = np.array(
        [exact_mode_mse(spec, problem, j, tol) for j in range(problem.d)], dtype=float
    )
    tail = problem.x_star[problem.d :]
    bias = float(np.dot(tail, tail))
    sa = problem.dose * problem.gains
    if spec.family in (EstimatorFamily.POISSON_MAP, EstimatorFamily.HOMOSCEDASTIC_MAP):
        gamma = spec.tau / (sa * sa)
    else:
        gamma = np.empty(0)
    return ModeMSEReport(
        per_mode_mse=per_mode,
        truncation_bias=bias,
        total=float(per_mode.sum() + bias),
        gamma=gamma,
    )


def predicted_ratio(spec: EstimatorSpec, s: float, a: float) -> float:
    """Low-count limit of MSE(spec)/MSE(unregularized) for one mode.

    With ``gamma = tau/(s a)^2`` the limits are ``(2/(1+sqrt(1+4 gamma)))^2``
    for the Poisson MAP family, ``(1/(1+gamma))^2`` for the homoscedastic
    family, and ``hg_shrinkage_constant(epsilon)^2`` for the heteroscedastic
    one. Undefined for the unregularized MLE (the ratio is identically 1).
    """
    if not (s > 0 and a > 0):
        raise ValueError("dose and gain must be positive")
    fam = spec.family
    if fam is EstimatorFamily.POISSON_MLE:
        raise UnsupportedFamily("ratio prediction is undefined for the unregularized MLE")
    sa = s * a
    gamma = spec.tau / (sa * sa)
    if fam is EstimatorFamily.POISSON_MAP:
        c = 2.0 / (1.0 + math.sqrt(1.0 + 4.0 * gamma))
        return c * c
    if fam is EstimatorFamily.HOMOSCEDASTIC_MAP:
        c = 1.0 / (1.0 + gamma)
        return c * c
    if fam is EstimatorFamily.HETEROSCEDASTIC_HG:
        c = hg_shrinkage_constant(spec.epsilon)
        return c * c
    raise UnsupportedFamily(f"unknown family {fam!r}")


def global_ratio_prediction(spec: EstimatorSpec, problem: DiagonalProblem) -> float:
    """Variance-weighted average of the per-mode ratio predictions.

    Weights are the per-mode MLE risks ``x_j/(s a_j)``; their sum must be
    positive, otherwise :class:`DegenerateWeights` is raised.
    """
    s = problem.dose
    d = problem.d
    x_obs = problem.x_star[:d]
    weights = x_obs / (s * problem.gains)
    v_total = float(weights.sum())
    if not (v_total > 0):
        raise DegenerateWeights("observed-mode MLE risk sums to zero")
    ratios = np.array(
        [predicted_ratio(spec, s, float(aj)) for aj in problem.gains], dtype=float
    )
    return float(np.dot(weights, ratios) / v_total)


def polynomial_problem(
    alpha: float,
    beta: float,
    m: int,
    s: float,
    d: int | None = None,
) -> DiagonalProblem:
    """Polynomial-decay instance: ``x_j = j**-alpha``, ``a_j = j**-beta``.

    Indices run 1..m in the decay laws. Requires ``alpha > 1/2`` (finite
    signal energy) and ``beta > 0`` (genuine ill-posedness); violations raise
    :class:`InvalidDecay`. ``d`` defaults to m (every mode observed).
    """
    if not (alpha > 0.5):
        raise InvalidDecay(f"alpha must exceed 1/2, got {alpha!r}")
    if not (beta > 0):
        raise InvalidDecay(f"beta must be positive, got {beta!r}")
    if m < 1:
        raise ValueError("m must be at least 1")
    if d is None:
        d = m
    if not (1 <= d <= m):
        raise ValueError(f"resolution d={d} outside 1..{m}")
    idx = np.arange(1, m + 1, dtype=float)
    return DiagonalProblem(gains=idx[:d] ** -beta, x_star=idx**-alpha, dose=s)


def optimal_resolution(
    alpha: float,
    beta: float,
    m: int,
    s: float,
    spec: EstimatorSpec | None = None,
) -> int:
    """Risk-minimizing number of observed modes for a polynomial problem.

    Performs the exact discrete search over d in {1..m} of the unregularized
    risk law: variance ``sum_{j<=d} x_j/(s a_j)`` plus truncation bias
    ``sum_{j>d} x_j^2``, evaluated with prefix sums. The ``spec`` argument is
    validated for API uniformity but the search target is always this
    unregularized trade-off; ties break toward the smallest d.
    """
    if spec is not None and not isinstance(spec, EstimatorSpec):
        raise TypeError("spec must be an EstimatorSpec or None")
    if not (alpha > 0.5):
        raise InvalidDecay(f"alpha must exceed 1/2, got {alpha!r}")
    if not (beta > 0):
        raise InvalidDecay(f"beta must be positive, got {beta!r}")
    if m < 1:
        raise ValueError("m must be at least 1")
    if not (s > 0):
        raise ValueError("dose must be positive")
    idx = np.arange(1, m + 1, dtype=float)
    variance = np.cumsum(idx ** (beta - alpha)) / s
    energy = idx ** (-2.0 * alpha)
    # tail_bias[k] = sum_{j > k+1} x_j^2 for d = k+1
    tail_bias = np.concatenate([np.cumsum(energy[::-1])[::-1][1:], [0.0]])
    total = variance + tail_bias
    return int(np.argmin(total)) + 1
