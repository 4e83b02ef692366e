"""Iterative reconstruction: MAP-EM, projected BB gradient, weights, tau tuning.

All solvers run on a :class:`ProjectionSystem` -- a sparse forward matrix plus
an image-domain support mask. CT problems build one from a
:class:`~lowdose.tomo.ScanGeometry`; a diagonal system over arbitrary gains
serves as the cross-check harness against the closed-form per-mode rules.
Every public solver accepts either a geometry or a system.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse

from . import tomo
from .tomo import Image, ScanGeometry, Sinogram

__all__ = [
    "ProjectionSystem",
    "SolveConfig",
    "ReconstructionResult",
    "ObjectiveKind",
    "WeightScheme",
    "ObjectiveSpec",
    "NonIntegerCounts",
    "NonPositiveInit",
    "NonFiniteObjective",
    "MissingOracle",
    "MissingFBP",
    "TuningFailure",
    "initial_image",
    "poisson_map_osl",
    "quadratic_solve",
    "regularized_hg_solve",
    "pwls_weights",
    "solve_objective",
    "tune_tau",
]

_EM_MAX_ITERS = 20_000
_PGD_MAX_ITERS = 5_000
_ARMIJO = 1e-4


class NonIntegerCounts(ValueError):
    """Count data must be nonnegative integers."""


class NonPositiveInit(ValueError):
    """Multiplicative updates need a strictly positive start on the support."""


class NonFiniteObjective(RuntimeError):
    """Objective or gradient overflowed to a non-finite value."""


class MissingOracle(ValueError):
    """Oracle weights require the true expected counts."""


class MissingFBP(ValueError):
    """Plug-in-FBP weights require an FBP image (hence a scan geometry)."""


class TuningFailure(RuntimeError):
    """Every tuning cell failed; no tau can be selected."""


class ObjectiveKind(enum.Enum):
    POISSON_MAP = "poisson_map"
    PWLS = "pwls"
    REGULARIZED_HG = "regularized_hg"


class WeightScheme(enum.Enum):
    ORACLE = "oracle"
    PLUG_IN = "plug_in"
    PLUG_IN_FBP = "plug_in_fbp"
    HOMOSCEDASTIC = "homoscedastic"


@dataclass(frozen=True)
class ObjectiveSpec:
    """Which data objective to minimize, with its hyperparameters."""

    kind: ObjectiveKind
    tau: float = 0.0
    epsilon: float = 0.0
    weights: WeightScheme | None = None

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.kind is ObjectiveKind.PWLS:
            if self.weights is None:
                raise ValueError("PWLS objective needs a weight scheme")
            if self.weights is not WeightScheme.HOMOSCEDASTIC and not (self.epsilon > 0):
                raise ValueError(f"{self.weights.value} weights need epsilon > 0")
        if self.kind is ObjectiveKind.REGULARIZED_HG and not (self.epsilon > 0):
            raise ValueError("regularized HG objective needs epsilon > 0")


@dataclass(frozen=True)
class SolveConfig:
    """Iteration limits and tolerances shared by all solvers.

    ``max_iters=None`` picks the per-solver default (20000 for MAP-EM, 5000
    for the projected-gradient solvers).
    """

    max_iters: int | None = None
    obj_rel_tol: float = 1e-10
    step_tol: float = 1e-8
    em_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not (self.obj_rel_tol >= 0 and self.step_tol >= 0 and self.em_floor > 0):
            raise ValueError("tolerances must be nonnegative and em_floor positive")


@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    image: Image
    iterations: int
    converged: bool
    objective_trace: np.ndarray


@dataclass(frozen=True, eq=False)
class ProjectionSystem:
    """Sparse forward matrix with image support and data layout."""

    matrix: scipy.sparse.spmatrix
    image_shape: tuple
    support: np.ndarray
    data_shape: tuple
    geom: ScanGeometry | None = None

    def __post_init__(self) -> None:
        support = np.asarray(self.support, dtype=bool)
        object.__setattr__(self, "support", support)
        n_pix = int(np.prod(self.image_shape))
        n_rays = int(np.prod(self.data_shape))
        if self.matrix.shape != (n_rays, n_pix):
            raise ValueError(f"matrix shape {self.matrix.shape} != ({n_rays}, {n_pix})")
        if support.shape != tuple(self.image_shape):
            raise ValueError("support mask must match image_shape")

    @classmethod
    def from_geometry(cls, geom: ScanGeometry) -> "ProjectionSystem":
        n = geom.image_size
        return cls(
            matrix=tomo.projection_matrix(geom),
            image_shape=(n, n),
            support=tomo.fov_mask(n),
            data_shape=(geom.num_angles, geom.num_bins),
            geom=geom,
        )

    @classmethod
    def diagonal(cls, gains: np.ndarray) -> "ProjectionSystem":
        """One bin per pixel with per-pixel gain; the closed-form harness."""
        gains = np.asarray(gains, dtype=float)
        if gains.ndim != 1 or not np.all(gains > 0):
            raise ValueError("gains must be a 1-D positive vector")
        n = gains.size
        return cls(
            matrix=scipy.sparse.diags(gains).tocsr(),
            image_shape=(1, n),
            support=np.ones((1, n), dtype=bool),
            data_shape=(1, n),
        )


def _as_system(system: ScanGeometry | ProjectionSystem) -> ProjectionSystem:
    if isinstance(system, ProjectionSystem):
        return system
    if isinstance(system, ScanGeometry):
        return ProjectionSystem.from_geometry(system)
    raise TypeError(f"expected ScanGeometry or ProjectionSystem, got {type(system)!r}")


def _data_array(sys: ProjectionSystem, data, name: str = "counts") -> np.ndarray:
    values = data.values if isinstance(data, Sinogram) else np.asarray(data, dtype=float)
    if values.shape != tuple(sys.data_shape):
        raise tomo.ShapeMismatch(f"{name} shape {values.shape} != {tuple(sys.data_shape)}")
    return np.asarray(values, dtype=float).ravel()


def _check_counts(y: np.ndarray) -> None:
    if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.floor(y)):
        raise NonIntegerCounts("counts must be finite nonnegative integers")


def _result(sys: ProjectionSystem, x: np.ndarray, iters: int, conv: bool, trace) -> ReconstructionResult:
    img = Image(x.reshape(sys.image_shape), sys.support)
    return ReconstructionResult(img, iters, conv, np.asarray(trace, dtype=float))


def initial_image(system: ScanGeometry | ProjectionSystem, counts, s: float) -> Image:
    """Count-matched flat start: constant v on the support with
    ``mean(s * forward(v)) = mean(counts)``; floor 1e-6 when counts are all zero."""
    sys = _as_system(system)
    y = _data_array(sys, counts)
    if not (s > 0):
        raise ValueError("dose must be positive")
    ones = sys.support.ravel().astype(float)
    mean_unit = float((sys.matrix @ ones).mean())
    mean_counts = float(y.mean())
    if mean_counts <= 0 or mean_unit <= 0:
        v = 1e-6
    else:
        v = mean_counts / (s * mean_unit)
    return Image(np.where(sys.support, v, 0.0), sys.support)


def _x0_flat(sys: ProjectionSystem, x0, counts, s: float) -> np.ndarray:
    if x0 is None:
        x0 = initial_image(sys, counts, s)
    pixels = x0.pixels if isinstance(x0, Image) else np.asarray(x0, dtype=float)
    if pixels.shape != tuple(sys.image_shape):
        raise tomo.ShapeMismatch(f"x0 shape {pixels.shape} != {tuple(sys.image_shape)}")
    x = pixels.astype(float).ravel().copy()
    x[~sys.support.ravel()] = 0.0
    return x


def poisson_map_osl(
    system: ScanGeometry | ProjectionSystem,
    counts,
    s: float,
    tau: float,
    cfg: SolveConfig | None = None,
    x0: Image | np.ndarray | None = None,
) -> ReconstructionResult:
    """MAP-EM with a one-step-late quadratic penalty.

    Update: ``x <- x * s * A^T(y / max(s A x, em_floor)) / (s A^T 1 + tau x)``
    restricted to the support. ``tau = 0`` is plain ML-EM. The objective trace
    records ``sum(mu - y log mu) + tau/2 ||x||^2`` per iterate.
    """
    sys = _as_system(system)
    y = _data_array(sys, counts)
    _check_counts(y)
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if not (s > 0):
        raise ValueError("dose must be positive")
    cfg = cfg or SolveConfig()
    max_iters = cfg.max_iters or _EM_MAX_ITERS
    supp = sys.support.ravel()
    x = _x0_flat(sys, x0, counts, s)
    if np.any(x[supp] <= 0):
        raise NonPositiveInit("x0 must be strictly positive on the support")

    A = sys.matrix.tocsr()
    At = A.T.tocsr()
    sens = s * (At @ np.ones(A.shape[0]))

    def objective(mu: np.ndarray, xv: np.ndarray) -> float:
        safe = np.maximum(mu, cfg.em_floor)
        return float(mu.sum() - np.dot(y, np.log(safe))) + 0.5 * tau * float(np.dot(xv, xv))

    mu = s * (A @ x)
    trace = [objective(mu, x)]
    if not math.isfinite(trace[0]):
        raise NonFiniteObjective("objective not finite at the initial point")
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        back = At @ (y / np.maximum(mu, cfg.em_floor))
        denom = sens + tau * x
        with np.errstate(invalid="ignore", divide="ignore"):
            x = np.where(supp & (denom > 0), x * s * back / np.where(denom > 0, denom, 1.0), 0.0)
        mu = s * (A @ x)
        f = objective(mu, x)
        if not math.isfinite(f):
            raise NonFiniteObjective(f"objective became non-finite at iteration {iters}")
        prev = trace[-1]
        trace.append(f)
        if abs(prev - f) <= cfg.obj_rel_tol * max(1.0, abs(prev)):
            converged = True
            break
    return _result(sys, x, iters, converged, trace)


def _pgd_bb(
    sys: ProjectionSystem,
    fobj: Callable[[np.ndarray], tuple],
    fgrad: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    cfg: SolveConfig,
) -> tuple[np.ndarray, int, bool, list]:
    """Projected gradient descent with Barzilai-Borwein steps and a monotone
    Armijo backtracking safeguard. Projection: clip to [0, inf) on the support.

    ``fobj(x)`` returns ``(value, mu)`` where ``mu = s A x`` is the forward
    projection; ``fgrad(x, mu)`` reuses it so each trial costs one matvec.
    """
    supp = sys.support.ravel()

    def proj(z: np.ndarray) -> np.ndarray:
        out = np.maximum(z, 0.0)
        out[~supp] = 0.0
        return out

    x = proj(x0.copy())
    f, mu = fobj(x)
    g = fgrad(x, mu)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteObjective("objective or gradient not finite at the initial point")
    trace = [f]
    gn = float(np.linalg.norm(g))
    xn = float(np.linalg.norm(x))
    alpha = xn / gn if (gn > 0 and xn > 0) else (1.0 / gn if gn > 0 else 1.0)
    max_iters = cfg.max_iters or _PGD_MAX_ITERS
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        # monotone backtracking from the current BB guess
        while True:
            x_new = proj(x - alpha * g)
            d = x_new - x
            dn = float(np.dot(d, d))
            if dn == 0.0:
                converged = True  # projected step vanished: stationary
                break
            f_new, mu_new = fobj(x_new)
            if math.isfinite(f_new) and f_new <= f - (_ARMIJO / alpha) * dn:
                break
            alpha *= 0.5
            if alpha < 1e-20:
                converged = True  # step length hit the numerical floor
                break
        if converged:
            break
        g_new = fgrad(x_new, mu_new)
        if not np.all(np.isfinite(g_new)):
            raise NonFiniteObjective(f"gradient became non-finite at iteration {iters}")
        dg = g_new - g
        sy = float(np.dot(d, dg))
        alpha = min(max(dn / sy, 1e-12), 1e12) if sy > 0 else alpha * 2.0
        x, g = x_new, g_new
        prev, f = f, f_new
        trace.append(f)
        pg = x - proj(x - g)
        if np.max(np.abs(pg)) < cfg.step_tol * (1.0 + float(np.max(np.abs(x)))):
            converged = True
            break
        if abs(prev - f) <= cfg.obj_rel_tol * max(1.0, abs(prev)):
            converged = True
            break
    return x, iters, converged, trace


def _quadratic_terms(sys: ProjectionSystem, y: np.ndarray, w: np.ndarray, s: float, tau: float):
    """Objective/gradient pair for the weighted least-squares data term."""
    A = sys.matrix.tocsr()
    At = A.T.tocsr()

    def fobj(xv: np.ndarray) -> tuple:
        mu = s * (A @ xv)
        r = mu - y
        return 0.5 * float(np.dot(w * r, r)) + 0.5 * tau * float(np.dot(xv, xv)), mu

    def fgrad(xv: np.ndarray, mu: np.ndarray) -> np.ndarray:
        return s * (At @ (w * (mu - y))) + tau * xv

    return fobj, fgrad


def _hg_terms(sys: ProjectionSystem, y: np.ndarray, s: float, tau: float, epsilon: float):
    """Objective/gradient pair for the variance-coupled Gaussian data term."""
    A = sys.matrix.tocsr()
    At = A.T.tocsr()

    def fobj(xv: np.ndarray) -> tuple:
        mu = s * (A @ xv)
        var = mu + epsilon
        r = y - mu
        val = float(np.sum(0.5 * np.log(var) + r * r / (2.0 * var))) + 0.5 * tau * float(
            np.dot(xv, xv)
        )
        return val, mu

    def fgrad(xv: np.ndarray, mu: np.ndarray) -> np.ndarray:
        var = mu + epsilon
        r = y - mu
        dmu = 0.5 / var - r / var - r * r / (2.0 * var * var)
        return s * (At @ dmu) + tau * xv

    return fobj, fgrad


def quadratic_solve(
    system: ScanGeometry | ProjectionSystem,
    counts,
    s: float,
    tau: float,
    weights,
    cfg: SolveConfig | None = None,
    x0: Image | np.ndarray | None = None,
) -> ReconstructionResult:
    """Nonnegative weighted least squares with a quadratic penalty.

    Minimizes ``1/2 sum_j w_j (s (A x)_j - y_j)^2 + tau/2 ||x||^2`` over the
    support with x >= 0, by projected BB gradient descent with monotone
    backtracking.
    """
    sys = _as_system(system)
    y = _data_array(sys, counts)
    w = _data_array(sys, weights, name="weights")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if not (s > 0):
        raise ValueError("dose must be positive")
    cfg = cfg or SolveConfig()
    fobj, fgrad = _quadratic_terms(sys, y, w, s, tau)
    x = _x0_flat(sys, x0, counts, s)
    x, iters, conv, trace = _pgd_bb(sys, fobj, fgrad, x, cfg)
    return _result(sys, x, iters, conv, trace)


def regularized_hg_solve(
    system: ScanGeometry | ProjectionSystem,
    counts,
    s: float,
    tau: float,
    epsilon: float,
    cfg: SolveConfig | None = None,
    x0: Image | np.ndarray | None = None,
) -> ReconstructionResult:
    """Heteroscedastic Gaussian objective with mean-dependent variance floor.

    Minimizes ``sum_j [ log(mu_j+eps)/2 + (y_j-mu_j)^2 / (2 (mu_j+eps)) ]
    + tau/2 ||x||^2`` with ``mu = s A x``, x >= 0 on the support, using the
    same projected BB machinery as :func:`quadratic_solve`.
    """
    sys = _as_system(system)
    y = _data_array(sys, counts)
    if not (epsilon > 0):
        raise ValueError("epsilon must be positive")
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if not (s > 0):
        raise ValueError("dose must be positive")
    cfg = cfg or SolveConfig()
    fobj, fgrad = _hg_terms(sys, y, s, tau, epsilon)
    x = _x0_flat(sys, x0, counts, s)
    x, iters, conv, trace = _pgd_bb(sys, fobj, fgrad, x, cfg)
    return _result(sys, x, iters, conv, trace)


def pwls_weights(
    scheme: WeightScheme,
    counts,
    epsilon: float,
    expected=None,
    fbp_image: Image | None = None,
    system: ScanGeometry | ProjectionSystem | None = None,
    s: float | None = None,
) -> np.ndarray:
    """Per-bin weights for :func:`quadratic_solve`.

    oracle: ``1/(mu*_j + eps)`` from the true expected counts; plug_in:
    ``1/(y_j + eps)``; plug_in_fbp: ``1/(s (A fbp)_j + eps)``; homoscedastic:
    all ones. The three data-driven schemes need ``epsilon > 0``.
    """
    if scheme is WeightScheme.HOMOSCEDASTIC:
        values = counts.values if isinstance(counts, Sinogram) else np.asarray(counts, dtype=float)
        return np.ones_like(values, dtype=float)
    if not (epsilon > 0):
        raise ValueError("epsilon must be positive")
    if scheme is WeightScheme.ORACLE:
        if expected is None:
            raise MissingOracle("oracle weights need the true expected counts")
        mu = expected.values if isinstance(expected, Sinogram) else np.asarray(expected, dtype=float)
        return 1.0 / (mu + epsilon)
    if scheme is WeightScheme.PLUG_IN:
        y = counts.values if isinstance(counts, Sinogram) else np.asarray(counts, dtype=float)
        return 1.0 / (y + epsilon)
    if scheme is WeightScheme.PLUG_IN_FBP:
        if fbp_image is None or system is None or s is None:
            raise MissingFBP("plug-in-FBP weights need an FBP image, the system, and the dose")
        sys = _as_system(system)
        mu_hat = s * (sys.matrix @ fbp_image.pixels.ravel())
        return (1.0 / (mu_hat + epsilon)).reshape(tuple(sys.data_shape))
    raise ValueError(f"unknown weight scheme {scheme!r}")


def solve_objective(
    spec: ObjectiveSpec,
    system: ScanGeometry | ProjectionSystem,
    counts,
    s: float,
    cfg: SolveConfig | None = None,
    x0: Image | np.ndarray | None = None,
    ground_truth: Image | np.ndarray | None = None,
    fbp_image: Image | None = None,
) -> ReconstructionResult:
    """Dispatch a data objective to its solver, building weights as needed.

    Oracle weights require ``ground_truth``; plug-in-FBP weights use
    ``fbp_image`` when given, otherwise run FBP on ``counts`` (geometry
    systems only).
    """
    sys = _as_system(system)
    if spec.kind is ObjectiveKind.POISSON_MAP:
        return poisson_map_osl(sys, counts, s, spec.tau, cfg, x0)
    if spec.kind is ObjectiveKind.REGULARIZED_HG:
        return regularized_hg_solve(sys, counts, s, spec.tau, spec.epsilon, cfg, x0)
    # PWLS
    scheme = spec.weights
    if scheme is WeightScheme.ORACLE:
        if ground_truth is None:
            raise MissingOracle("oracle PWLS needs the ground-truth image")
        truth = ground_truth.pixels if isinstance(ground_truth, Image) else np.asarray(ground_truth)
        expected = (s * (sys.matrix @ truth.astype(float).ravel())).reshape(tuple(sys.data_shape))
        w = pwls_weights(scheme, counts, spec.epsilon, expected=expected)
    elif scheme is WeightScheme.PLUG_IN_FBP:
        if fbp_image is None:
            if sys.geom is None:
                raise MissingFBP("plug-in-FBP weights need a scan geometry to run FBP")
            sino = counts if isinstance(counts, Sinogram) else Sinogram(
                np.asarray(counts, dtype=float).reshape(tuple(sys.data_shape)), sys.geom
            )
            fbp_image = tomo.fbp(sys.geom, sino, s)
        w = pwls_weights(scheme, counts, spec.epsilon, fbp_image=fbp_image, system=sys, s=s)
    else:
        w = pwls_weights(scheme, counts, spec.epsilon)
    return quadratic_solve(sys, counts, s, spec.tau, w, cfg, x0)


def tune_tau(
    spec: ObjectiveSpec,
    system: ScanGeometry | ProjectionSystem,
    tuning_set: Sequence,
    tau_grid,
    cfg: SolveConfig | None = None,
) -> tuple[float, list]:
    """Pick tau minimizing mean FOV MSE over tuning instances.

    ``tuning_set`` holds ``(ground_truth, counts, s)`` triples. Every grid
    value is run to convergence on every instance from the count-matched
    start; failed cells are dropped from that tau's average, a tau with no
    surviving cell is skipped, and ties break toward the larger tau. Returns
    ``(tau_star, [(tau, mean_mse), ...])`` over the deduplicated grid.
    """
    sys = _as_system(system)
    grid = list(dict.fromkeys(float(t) for t in tau_grid))
    if not grid:
        raise ValueError("tau grid is empty")
    if not tuning_set:
        raise ValueError("tuning set is empty")
    curve: list = []
    best_tau = math.nan
    best_mse = math.inf
    for tau in grid:
        cell_mses = []
        for truth, counts, s in tuning_set:
            trial = ObjectiveSpec(spec.kind, tau=tau, epsilon=spec.epsilon, weights=spec.weights)
            try:
                res = solve_objective(trial, sys, counts, s, cfg, ground_truth=truth)
            except (NonFiniteObjective, FloatingPointError):
                continue  # cell failed; drop it from this tau's average
            cell_mses.append(tomo.fov_mse(res.image, truth))
        mse = float(np.mean(cell_mses)) if cell_mses else math.nan
        curve.append((tau, mse))
        if math.isnan(mse):
            continue
        if mse < best_mse or (mse == best_mse and tau > best_tau):
            best_mse = mse
            best_tau = tau
    if math.isnan(best_tau):
        raise TuningFailure("all tuning cells failed for every tau in the grid")
    return best_tau, curve
