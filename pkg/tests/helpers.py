"""Independent oracles shared by the test modules.

Everything here is written from the mathematical definitions only -- no code
is imported from the package under test except enum/spec types, so agreement
between package output and these oracles is a genuine cross-check.
"""

import math

import numpy as np
import scipy.stats

from lowdose.diag_model import EstimatorFamily, EstimatorSpec


def objective_derivative(spec: EstimatorSpec, s: float, a: float, y: float):
    """d/dt of the per-mode data objective, written from the model formulas.

    Families: Poisson negative log-likelihood (optionally + tau t^2/2),
    homoscedastic squared error + tau t^2/2, and the variance-coupled
    Gaussian negative log-likelihood with floor epsilon.
    """
    sa = s * a
    fam = spec.family
    if fam is EstimatorFamily.POISSON_MLE:
        return lambda t: sa - (y / t if t > 0 else math.inf)
    if fam is EstimatorFamily.POISSON_MAP:
        tau = spec.tau
        return lambda t: sa - (y / t if t > 0 else math.inf) + tau * t
    if fam is EstimatorFamily.HOMOSCEDASTIC_MAP:
        tau = spec.tau
        return lambda t: -sa * (y - sa * t) + tau * t
    if fam is EstimatorFamily.HETEROSCEDASTIC_HG:
        eps = spec.epsilon
        q = y + eps

        def df(t):
            v = sa * t + eps
            return sa * (v * v + v - q * q) / (2.0 * v * v)

        return df
    raise ValueError(f"unknown family {fam!r}")


def scalar_minimizer(spec: EstimatorSpec, s: float, a: float, y: float) -> float:
    """Numerically minimize the per-mode objective over t >= 0.

    The objectives are convex (unimodal) in t, so the minimizer is either 0
    (derivative nonnegative just right of 0) or the unique sign change of the
    derivative, found by bisection to machine precision.
    """
    sa = s * a
    df = objective_derivative(spec, s, a, y)
    hi = y / sa + 1.0
    probe = min(1e-12, hi * 1e-6)
    if df(probe) >= 0.0:
        # derivative may blow down at t -> 0+ only via -y/t; y=0 keeps it >= 0
        if y == 0 or spec.family is EstimatorFamily.HETEROSCEDASTIC_HG:
            return 0.0
    lo = 0.0
    if df(hi) <= 0.0:  # pragma: no cover - bracket always holds by dominance
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if df(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def closed_form(spec: EstimatorSpec, s: float, a: float, y: float) -> float:
    """Textbook closed forms, written independently for oracle comparison."""
    sa = s * a
    fam = spec.family
    if fam is EstimatorFamily.POISSON_MLE:
        return y / sa
    if fam is EstimatorFamily.POISSON_MAP:
        return (-sa + math.sqrt(sa * sa + 4.0 * spec.tau * y)) / (2.0 * spec.tau)
    if fam is EstimatorFamily.HOMOSCEDASTIC_MAP:
        return max(sa * y / (sa * sa + spec.tau), 0.0)
    if fam is EstimatorFamily.HETEROSCEDASTIC_HG:
        q = y + spec.epsilon
        return max(((-1.0 + math.sqrt(1.0 + 4.0 * q * q)) / 2.0 - spec.epsilon) / sa, 0.0)
    raise ValueError(f"unknown family {fam!r}")


def naive_mode_mse(estimate, s: float, a: float, x_true: float) -> float:
    """E[(estimate(y) - x)^2] by direct summation with scipy's Poisson pmf.

    ``estimate`` maps an integer count to a point estimate. The cutoff leaves
    a tail mass far below 1e-20 for every mean used in the tests.
    """
    mu = s * a * x_true
    if mu == 0.0:
        d = estimate(0) - x_true
        return d * d
    cutoff = int(mu + 25.0 * math.sqrt(mu + 1.0) + 80.0)
    ks = np.arange(cutoff + 1)
    pk = scipy.stats.poisson.pmf(ks, mu)
    vals = np.array([(estimate(int(k)) - x_true) ** 2 for k in ks])
    return float(np.dot(pk, vals))


# Head-phantom ellipse table (value, semiaxes, center, rotation in degrees).
_ELLIPSES = (
    (2.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.0230, 0.00, -0.6050, 0.0),
    (0.01, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def raster_phantom(n: int) -> np.ndarray:
    """Independent per-pixel rasterizer of the standard head phantom.

    Uses an explicit rotation matrix per ellipse and per-pixel accumulation;
    output is min-max rescaled and masked to the inscribed circle, matching
    the documented phantom conventions.
    """
    out = np.zeros((n, n))
    for r in range(n):
        y = 1.0 - (r + 0.5) * 2.0 / n
        for c in range(n):
            x = -1.0 + (c + 0.5) * 2.0 / n
            v = 0.0
            for value, sa, sb, x0, y0, rot in _ELLIPSES:
                phi = math.radians(rot)
                rot_m = np.array(
                    [[math.cos(phi), math.sin(phi)], [-math.sin(phi), math.cos(phi)]]
                )
                u = rot_m @ np.array([x - x0, y - y0])
                if (u[0] / sa) ** 2 + (u[1] / sb) ** 2 <= 1.0:
                    v += value
            out[r, c] = v
    lo, hi = out.min(), out.max()
    out = np.zeros_like(out) if hi <= lo else (out - lo) / (hi - lo)
    half = (n - 1) / 2.0
    coords = np.arange(n) - half
    xx, yy = np.meshgrid(coords, coords)
    out[xx * xx + yy * yy > (n / 2.0) ** 2] = 0.0
    return out


def fd_gradient(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g
