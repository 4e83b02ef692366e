"""Command-line front end for the experiment runners.

Configuration comes from an optional flat ``key = value`` file (# comments,
comma-separated lists) plus repeatable ``--set key=value`` overrides. Exit
codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, solvers, tomo
from .bench import ConfigError, ExperimentConfig
from .io_utils import write_matrix_bin, write_matrix_csv

__all__ = ["cli_main", "parse_config_file"]


def parse_config_file(path) -> dict:
    """Read a flat key=value config file; '#' starts a comment."""
    out: dict = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_config(args) -> ExperimentConfig:
    mapping: dict = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        mapping[key.strip()] = value.strip()
    cfg = ExperimentConfig.from_mapping(mapping)
    if args.seed:
        cfg = cfg.shift_seeds(args.seed)
    return cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--seed", type=int, default=0, help="offset added to every configured seed")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a single config key (repeatable)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lowdose",
        description="Poisson-count CT bench: risk curves, tuning sweeps, diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("mse-vs-counts", "test-set MSE per method across count levels"),
        ("eps-sensitivity", "test-set MSE across the epsilon grid"),
        ("tau-curve", "tuning-set MSE over the whole tau grid"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("diag-props", help="exact vs predicted risk ratios (diagonal model)")
    p.add_argument("--out", default="results", help="directory, or a .csv file path")

    p = sub.add_parser("resolution-scaling", help="risk-optimal resolution vs dose")
    p.add_argument("--out", default="results")

    p = sub.add_parser("phantom", help="dump the phantom and its noiseless sinogram")
    _add_common(p)

    p = sub.add_parser("recon", help="single reconstruction at fixed hyperparameters")
    _add_common(p)
    p.add_argument(
        "--method",
        required=True,
        type=lambda v: v.replace("-", "_"),
        choices=sorted(bench.METHOD_NAMES),
    )
    p.add_argument("--c", type=float, required=True, help="target mean count level")
    p.add_argument("--tau", type=float, required=True, help="penalty weight")
    p.add_argument("--eps", type=float, default=0.0, help="epsilon (for epsilon methods)")
    return parser


def _cmd_phantom(args) -> int:
    cfg = _load_config(args)
    ws = bench._Workspace(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "phantom.csv", ws.truth.pixels)
    write_matrix_bin(out / "phantom.bin", ws.truth.pixels)
    write_matrix_csv(out / "sinogram.csv", ws.unit_proj.values)
    write_matrix_bin(out / "sinogram.bin", ws.unit_proj.values)
    print(f"wrote phantom ({cfg.n_side}x{cfg.n_side}) and noiseless sinogram to {out}")
    return 0


def _cmd_recon(args) -> int:
    cfg = _load_config(args)
    if bench.method_uses_epsilon(args.method) and not (args.eps > 0):
        raise ConfigError(f"method {args.method!r} needs --eps > 0")
    ws = bench._Workspace(cfg)
    c = args.c
    if not (c > 0):
        raise ConfigError("--c must be positive")
    s = ws.dose(c)
    counts = ws.counts(c, args.seed)
    spec = bench._make_objective(args.method, tau=args.tau, epsilon=args.eps)
    res = solvers.solve_objective(
        spec, ws.system, counts, s, ws.solve_cfg(args.method), ground_truth=ws.truth
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / f"recon_{args.method}.csv", res.image.pixels)
    write_matrix_bin(out / f"recon_{args.method}.bin", res.image.pixels)
    mse = tomo.fov_mse(res.image, ws.truth)
    print(
        f"{args.method}: c={args.c:g} tau={args.tau:g} eps={args.eps:g} seed={args.seed} "
        f"iterations={res.iterations} converged={res.converged} mse_fov={mse:.6e}"
    )
    return 0


def cli_main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "mse-vs-counts":
            cfg = _load_config(args)
            _, summary = bench.run_mse_vs_counts(cfg, args.out)
            print(f"wrote {len(summary.rows)} summary rows to {args.out}")
        elif args.command == "eps-sensitivity":
            cfg = _load_config(args)
            cells = bench.run_eps_sensitivity(cfg, args.out)
            print(f"wrote {len(cells.rows)} cells to {args.out}")
        elif args.command == "tau-curve":
            cfg = _load_config(args)
            table = bench.run_tau_curve(cfg, args.out)
            print(f"wrote {len(table.rows)} curve points to {args.out}")
        elif args.command == "diag-props":
            table = bench.run_diag_propositions(out_dir=args.out)
            print(f"wrote {len(table.rows)} rows to {args.out}")
        elif args.command == "resolution-scaling":
            points, slopes = bench.run_resolution_scaling(args.out)
            print(f"wrote {len(points.rows)} points, {len(slopes.rows)} slopes to {args.out}")
        elif args.command == "phantom":
            return _cmd_phantom(args)
        elif args.command == "recon":
            return _cmd_recon(args)
        else:  # pragma: no cover - argparse enforces the choice set
            parser.error(f"unknown command {args.command!r}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(cli_main())
