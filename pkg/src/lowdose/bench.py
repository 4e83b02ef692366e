"""Reproducible experiment runners over the CT pipeline and the diagonal model.

Every experiment is a pure function of its :class:`ExperimentConfig`: noise
seeds are explicit, cells run in a fixed order, and CSV output uses 17
significant digits with LF endings, so a rerun with the same config is
byte-identical. Wall-clock timings are kept on the in-memory rows only.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import diag_model, solvers, tomo
from .diag_model import DiagonalProblem, EstimatorSpec
from .io_utils import format_float
from .solvers import (
    NonFiniteObjective,
    ObjectiveKind,
    ObjectiveSpec,
    ProjectionSystem,
    SolveConfig,
    WeightScheme,
    solve_objective,
    tune_tau,
)
from .tomo import ScanGeometry, Sinogram

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ResultTable",
    "METHOD_NAMES",
    "run_mse_vs_counts",
    "run_eps_sensitivity",
    "run_tau_curve",
    "run_diag_propositions",
    "run_resolution_scaling",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# method name -> (objective kind, weight scheme, uses epsilon)
METHOD_NAMES = {
    "poisson_map": (ObjectiveKind.POISSON_MAP, None, False),
    "homoscedastic_ls": (ObjectiveKind.PWLS, WeightScheme.HOMOSCEDASTIC, False),
    "pwls_oracle": (ObjectiveKind.PWLS, WeightScheme.ORACLE, True),
    "pwls_plug_in": (ObjectiveKind.PWLS, WeightScheme.PLUG_IN, True),
    "pwls_plug_in_fbp": (ObjectiveKind.PWLS, WeightScheme.PLUG_IN_FBP, True),
    "reg_hg": (ObjectiveKind.REGULARIZED_HG, None, True),
}


def method_uses_epsilon(name: str) -> bool:
    return METHOD_NAMES[name][2]


def _make_objective(name: str, tau: float, epsilon: float) -> ObjectiveSpec:
    kind, scheme, uses_eps = METHOD_NAMES[name]
    return ObjectiveSpec(kind, tau=tau, epsilon=epsilon if uses_eps else 0.0, weights=scheme)


def _as_float_tuple(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in (p.strip() for p in value.split(",")) if v]
    return tuple(float(v) for v in value)


def _as_int_tuple(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in (p.strip() for p in value.split(",")) if v]
    out = []
    for v in value:
        f = float(v)
        if f != int(f):
            raise ConfigError(f"expected integer, got {v!r}")
        out.append(int(f))
    return tuple(out)


def _as_str_tuple(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in (p.strip() for p in value.split(",")) if v]
    return tuple(str(v) for v in value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale CT bench configuration with spec'd defaults."""

    n_side: int = 64
    num_angles: int = 60
    num_bins: int = 0  # 0 = geometry default, ceil(sqrt(2) n_side)
    bin_spacing: float = 1.0
    phantom: str = "shepp-logan"
    count_levels: tuple = (0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 1000.0)
    methods: tuple = (
        "poisson_map",
        "homoscedastic_ls",
        "pwls_oracle",
        "pwls_plug_in",
        "pwls_plug_in_fbp",
        "reg_hg",
    )
    eps_grid: tuple = (0.1, 0.5, 1.0)
    tau_grid: tuple | str = "auto"  # "auto": log grid around the Hessian scale
    tau_grid_points: int = 25
    tuning_seeds: tuple = (0, 1, 2, 3)
    test_seeds: tuple = (100, 101, 102, 103, 104, 105, 106, 107)
    max_iters_em: int = 20_000
    max_iters_pgd: int = 5_000
    obj_rel_tol: float = 1e-10
    step_tol: float = 1e-8
    em_floor: float = 1e-12

    def __post_init__(self) -> None:
        if self.n_side < 4:
            raise ConfigError("n_side must be at least 4")
        if not self.count_levels or any(c <= 0 for c in self.count_levels):
            raise ConfigError("count_levels must be a nonempty list of positive values")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        for m in self.methods:
            if m not in METHOD_NAMES:
                raise ConfigError(f"unknown method {m!r}; known: {sorted(METHOD_NAMES)}")
        if not self.eps_grid or any(e <= 0 for e in self.eps_grid):
            raise ConfigError("eps_grid must be a nonempty list of positive values")
        if isinstance(self.tau_grid, str):
            if self.tau_grid != "auto":
                raise ConfigError("tau_grid must be 'auto' or a list of positive values")
            if self.tau_grid_points < 2:
                raise ConfigError("tau_grid_points must be at least 2")
        elif not self.tau_grid or any(t <= 0 for t in self.tau_grid):
            raise ConfigError("tau_grid values must be positive")
        if not self.tuning_seeds or not self.test_seeds:
            raise ConfigError("seed lists must be nonempty")
        if set(self.tuning_seeds) & set(self.test_seeds):
            raise ConfigError("tuning and test seeds must be disjoint")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        """Build from flat key=value pairs (strings allowed for every value)."""
        coercers = {
            "n_side": int,
            "num_angles": int,
            "num_bins": int,
            "bin_spacing": float,
            "phantom": str,
            "count_levels": _as_float_tuple,
            "methods": _as_str_tuple,
            "eps_grid": _as_float_tuple,
            "tau_grid": lambda v: v if v == "auto" else _as_float_tuple(v),
            "tau_grid_points": int,
            "tuning_seeds": _as_int_tuple,
            "test_seeds": _as_int_tuple,
            "max_iters_em": int,
            "max_iters_pgd": int,
            "obj_rel_tol": float,
            "step_tol": float,
            "em_floor": float,
        }
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                kwargs[key] = coercers[key](raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from None
        return cls(**kwargs)

    def shift_seeds(self, offset: int) -> "ExperimentConfig":
        """Translate both seed lists; keeps tuning/test disjointness."""
        return replace(
            self,
            tuning_seeds=tuple(s + offset for s in self.tuning_seeds),
            test_seeds=tuple(s + offset for s in self.test_seeds),
        )


@dataclass
class ResultTable:
    """Ordered rows with a fixed column schema, serializable to stable CSV."""

    columns: tuple
    rows: list

    def write_csv(self, path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            cells = []
            for col in self.columns:
                v = row[col]
                if isinstance(v, bool):
                    cells.append("true" if v else "false")
                elif isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                elif isinstance(v, float):
                    cells.append(format_float(v))
                else:
                    cells.append(str(v))
            lines.append(",".join(cells))
        Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


class _Workspace:
    """Shared per-config state: geometry, phantom, projector, count cache."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.geom = ScanGeometry(cfg.n_side, cfg.num_angles, cfg.num_bins, cfg.bin_spacing)
        if cfg.phantom in ("shepp-logan", "shepp_logan"):
            self.truth = tomo.shepp_logan(cfg.n_side)
        else:
            self.truth = tomo.load_image(cfg.phantom, cfg.n_side)
        self.system = ProjectionSystem.from_geometry(self.geom)
        self.unit_proj = tomo.forward(self.geom, self.truth)
        mean_unit = float(self.unit_proj.values.mean())
        if mean_unit <= 0:
            raise ConfigError("phantom projects to an all-zero sinogram")
        self._mean_unit = mean_unit
        A = self.system.matrix
        self._mean_ata_diag = float(A.power(2).sum() / A.shape[1])
        self._counts: dict = {}

    def dose(self, c: float) -> float:
        return c / self._mean_unit

    def counts(self, c: float, seed: int) -> Sinogram:
        key = (float(c), int(seed))
        if key not in self._counts:
            expected = Sinogram(self.dose(c) * self.unit_proj.values, self.geom)
            self._counts[key] = tomo.sample_counts(expected, seed)
        return self._counts[key]

    def tau_grid(self, c: float) -> list:
        cfg = self.cfg
        if isinstance(cfg.tau_grid, str):  # "auto"
            tau_bar = self.dose(c) ** 2 * self._mean_ata_diag
            return list(
                np.logspace(math.log10(1e-4 * tau_bar), math.log10(1e2 * tau_bar), cfg.tau_grid_points)
            )
        return list(cfg.tau_grid)

    def solve_cfg(self, method: str) -> SolveConfig:
        cfg = self.cfg
        em = METHOD_NAMES[method][0] is ObjectiveKind.POISSON_MAP
        return SolveConfig(
            max_iters=cfg.max_iters_em if em else cfg.max_iters_pgd,
            obj_rel_tol=cfg.obj_rel_tol,
            step_tol=cfg.step_tol,
            em_floor=cfg.em_floor,
        )

    def tuning_instances(self, c: float) -> list:
        s = self.dose(c)
        return [(self.truth, self.counts(c, seed), s) for seed in self.cfg.tuning_seeds]

    def tune(self, method: str, c: float, epsilon: float) -> tuple[float, list]:
        spec = _make_objective(method, tau=1.0, epsilon=epsilon)
        return tune_tau(
            spec, self.system, self.tuning_instances(c), self.tau_grid(c), self.solve_cfg(method)
        )

    def select_epsilon(self, method: str, c_low: float) -> tuple[float, float]:
        """Smallest-tuning-MSE epsilon at the lowest count level (then frozen)."""
        best_eps = None
        best_mse = math.inf
        for eps in self.cfg.eps_grid:
            _, curve = self.tune(method, c_low, eps)
            mses = [m for _, m in curve if not math.isnan(m)]
            if not mses:
                continue
            m = min(mses)
            if m < best_mse:
                best_mse = m
                best_eps = eps
        if best_eps is None:
            raise solvers.TuningFailure(f"epsilon selection failed for {method}")
        return best_eps, best_mse

    def test_cells(self, method: str, c: float, tau: float, epsilon: float) -> list:
        """Solve the test seeds at fixed hyperparameters; one row dict per seed."""
        rows = []
        spec = _make_objective(method, tau=tau, epsilon=epsilon)
        s = self.dose(c)
        cfg = self.solve_cfg(method)
        for seed in self.cfg.test_seeds:
            t0 = time.perf_counter()
            row = {
                "method": method,
                "c": float(c),
                "eps": float(epsilon),
                "tau": float(tau),
                "seed": int(seed),
                "mse_fov": math.nan,
                "iterations": 0,
                "converged": False,
                "failed": False,
            }
            try:
                res = solve_objective(
                    spec, self.system, self.counts(c, seed), s, cfg, ground_truth=self.truth
                )
                row["mse_fov"] = tomo.fov_mse(res.image, self.truth)
                row["iterations"] = res.iterations
                row["converged"] = res.converged
            except (NonFiniteObjective, FloatingPointError):
                row["failed"] = True
            row["wall_time"] = time.perf_counter() - t0
            rows.append(row)
        return rows


_CELL_COLUMNS = ("method", "c", "eps", "tau", "seed", "mse_fov", "iterations", "converged", "failed")


def _summarize(cells: list) -> dict:
    ok = [r["mse_fov"] for r in cells if not r["failed"]]
    return {
        "mse_fov_mean": float(np.mean(ok)) if ok else math.nan,
        "n_seeds": len(ok),
    }


def run_mse_vs_counts(cfg: ExperimentConfig, out_dir=None) -> tuple[ResultTable, ResultTable]:
    """Risk-versus-counts protocol: select epsilon at the lowest count level,
    tune tau per (method, count level) on tuning seeds, evaluate test seeds.

    Returns (cells, summary); writes ``mse_vs_counts_cells.csv`` and
    ``mse_vs_counts_summary.csv`` when ``out_dir`` is given.
    """
    ws = _Workspace(cfg)
    c_low = min(cfg.count_levels)
    frozen_eps = {}
    for method in cfg.methods:
        if method_uses_epsilon(method):
            frozen_eps[method], _ = ws.select_epsilon(method, c_low)
        else:
            frozen_eps[method] = 0.0

    cells = []
    summary = []
    for method in cfg.methods:
        eps = frozen_eps[method]
        for c in cfg.count_levels:
            tau_star, _ = ws.tune(method, c, eps)
            rows = ws.test_cells(method, c, tau_star, eps)
            cells.extend(rows)
            agg = _summarize(rows)
            summary.append(
                {
                    "method": method,
                    "c": float(c),
                    "eps": float(eps),
                    "tau": float(tau_star),
                    "mse_fov_mean": agg["mse_fov_mean"],
                    "n_seeds": agg["n_seeds"],
                }
            )
    cells_table = ResultTable(_CELL_COLUMNS, cells)
    summary_table = ResultTable(
        ("method", "c", "eps", "tau", "mse_fov_mean", "n_seeds"), summary
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cells_table.write_csv(out / "mse_vs_counts_cells.csv")
        summary_table.write_csv(out / "mse_vs_counts_summary.csv")
    return cells_table, summary_table


def run_eps_sensitivity(cfg: ExperimentConfig, out_dir=None) -> ResultTable:
    """Test MSE for every epsilon in the grid (tau tuned per cell), with a
    tuned Poisson MAP baseline column; one CSV per method.

    All configured methods must take an epsilon.
    """
    for m in cfg.methods:
        if not method_uses_epsilon(m):
            raise ConfigError(f"eps-sensitivity only applies to epsilon methods, got {m!r}")
    ws = _Workspace(cfg)

    baseline = {}
    for c in cfg.count_levels:
        tau_star, _ = ws.tune("poisson_map", c, 0.0)
        rows = ws.test_cells("poisson_map", c, tau_star, 0.0)
        baseline[c] = _summarize(rows)["mse_fov_mean"]

    cells = []
    per_method: dict = {m: {} for m in cfg.methods}
    for method in cfg.methods:
        for eps in cfg.eps_grid:
            for c in cfg.count_levels:
                tau_star, _ = ws.tune(method, c, eps)
                rows = ws.test_cells(method, c, tau_star, eps)
                cells.extend(rows)
                per_method[method][(eps, c)] = _summarize(rows)["mse_fov_mean"]

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for method in cfg.methods:
            columns = ["target_c", "poisson_map"] + [f"eps_{e:g}" for e in cfg.eps_grid]
            rows = []
            for c in cfg.count_levels:
                row = {"target_c": float(c), "poisson_map": baseline[c]}
                for eps in cfg.eps_grid:
                    row[f"eps_{eps:g}"] = per_method[method][(eps, c)]
                rows.append(row)
            ResultTable(tuple(columns), rows).write_csv(out / f"eps_sensitivity_{method}.csv")
    return ResultTable(_CELL_COLUMNS, cells)


def run_tau_curve(cfg: ExperimentConfig, out_dir=None) -> ResultTable:
    """Mean tuning-seed MSE over the whole tau grid per (count level, method).

    Epsilon methods use the *first* grid epsilon (curves are about tau).
    Writes ``tau_curve_c<level>.csv`` per count level.
    """
    ws = _Workspace(cfg)
    all_rows = []
    for c in cfg.count_levels:
        rows_c = []
        for method in cfg.methods:
            eps = cfg.eps_grid[0] if method_uses_epsilon(method) else 0.0
            _, curve = ws.tune(method, c, eps)
            for tau, mse in curve:
                row = {
                    "method": method,
                    "c": float(c),
                    "eps": float(eps),
                    "tau": float(tau),
                    "mse_fov_mean": mse,
                }
                rows_c.append(row)
                all_rows.append(row)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            ResultTable(("method", "c", "eps", "tau", "mse_fov_mean"), rows_c).write_csv(
                out / f"tau_curve_c{c:g}.csv"
            )
    return ResultTable(("method", "c", "eps", "tau", "mse_fov_mean"), all_rows)


_DIAG_GAMMAS = (0.1, 1.0, 10.0)
_DIAG_MUS = (1e-2, 1e-3, 1e-4)
_DIAG_EPSES = (0.1, 1.0, 10.0)


def run_diag_propositions(cfg: ExperimentConfig | None = None, out_dir=None) -> ResultTable:
    """Exact-vs-predicted risk ratios on single-mode problems.

    MAP families sweep the regularization strength gamma; the heteroscedastic
    family sweeps its epsilon grid (gamma column is nan there). The
    homoscedastic rows also carry the residual of the exact finite-count risk
    identity ``(1/(1+g))^2 + (g/(1+g))^2 mu``.

    The sweep grid is fixed, so ``cfg`` is accepted only for call-shape
    uniformity with the other runners. ``out_dir`` may name a directory
    (writes ``diag_propositions.csv`` inside it) or a ``.csv`` file path.
    """
    rows = []

    def exact_ratio(spec: EstimatorSpec, mu: float) -> float:
        problem = DiagonalProblem(gains=np.array([1.0]), x_star=np.array([mu]), dose=1.0)
        num = diag_model.exact_mode_mse(spec, problem, 0)
        den = diag_model.exact_mode_mse(EstimatorSpec.poisson_mle(), problem, 0)
        return num / den

    for gamma in _DIAG_GAMMAS:
        for mu in _DIAG_MUS:
            for family, make in (
                ("poisson_map", EstimatorSpec.poisson_map),
                ("homoscedastic_map", EstimatorSpec.homoscedastic_map),
            ):
                spec = make(gamma)  # s*a = 1, so tau == gamma
                ratio = exact_ratio(spec, mu)
                predicted = diag_model.predicted_ratio(spec, 1.0, 1.0)
                identity = math.nan
                if family == "homoscedastic_map":
                    h = 1.0 / (1.0 + gamma)
                    identity = abs(ratio - (h * h + (1.0 - h) ** 2 * mu))
                rows.append(
                    {
                        "family": family,
                        "gamma": float(gamma),
                        "mu": float(mu),
                        "eps": math.nan,
                        "exact_ratio": ratio,
                        "predicted_ratio": predicted,
                        "residual": abs(ratio - predicted),
                        "identity_residual": identity,
                    }
                )
    for eps in _DIAG_EPSES:
        for mu in _DIAG_MUS:
            spec = EstimatorSpec.heteroscedastic_hg(eps)
            ratio = exact_ratio(spec, mu)
            predicted = diag_model.predicted_ratio(spec, 1.0, 1.0)
            rows.append(
                {
                    "family": "heteroscedastic_hg",
                    "gamma": math.nan,
                    "mu": float(mu),
                    "eps": float(eps),
                    "exact_ratio": ratio,
                    "predicted_ratio": predicted,
                    "residual": abs(ratio - predicted),
                    "identity_residual": math.nan,
                }
            )
    table = ResultTable(
        (
            "family",
            "gamma",
            "mu",
            "eps",
            "exact_ratio",
            "predicted_ratio",
            "residual",
            "identity_residual",
        ),
        rows,
    )
    if out_dir is not None:
        out = Path(out_dir)
        if out.suffix == ".csv":
            out.parent.mkdir(parents=True, exist_ok=True)
            table.write_csv(out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            table.write_csv(out / "diag_propositions.csv")
    return table


_SCALING_EXPONENTS = ((1.0, 1.0), (1.0, 3.0), (1.5, 0.5))


def run_resolution_scaling(
    out_dir=None,
    exponents=_SCALING_EXPONENTS,
    dose_grid=None,
    m: int = 2048,
) -> tuple[ResultTable, ResultTable]:
    """Risk-optimal mode count versus dose, with a log-log slope fit per
    (alpha, beta); the predicted slope is 1/(alpha+beta)."""
    if dose_grid is None:
        dose_grid = np.logspace(2, 6, 9)
    points = []
    slopes = []
    for alpha, beta in exponents:
        ds = []
        for s in dose_grid:
            d_star = diag_model.optimal_resolution(alpha, beta, m, float(s))
            ds.append(d_star)
            points.append(
                {"alpha": float(alpha), "beta": float(beta), "s": float(s), "d_star": int(d_star)}
            )
        slope, intercept = np.polyfit(np.log(np.asarray(dose_grid, dtype=float)), np.log(ds), 1)
        slopes.append(
            {
                "alpha": float(alpha),
                "beta": float(beta),
                "slope": float(slope),
                "intercept": float(intercept),
                "predicted_slope": 1.0 / (alpha + beta),
            }
        )
    points_table = ResultTable(("alpha", "beta", "s", "d_star"), points)
    slopes_table = ResultTable(("alpha", "beta", "slope", "intercept", "predicted_slope"), slopes)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        points_table.write_csv(out / "resolution_scaling.csv")
        slopes_table.write_csv(out / "resolution_scaling_slopes.csv")
    return points_table, slopes_table
