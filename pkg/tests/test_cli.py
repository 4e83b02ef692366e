import subprocess
import sys

import numpy as np
import pytest

from lowdose.bench import ConfigError
from lowdose.cli import cli_main, parse_config_file
from lowdose.io_utils import read_matrix_bin, read_matrix_csv
from lowdose.tomo import shepp_logan

TINY_ARGS = [
    "--set", "n_side=16",
    "--set", "num_angles=10",
    "--set", "count_levels=10",
    "--set", "methods=homoscedastic_ls",
    "--set", "tau_grid_points=3",
    "--set", "tuning_seeds=0",
    "--set", "test_seeds=100",
]


def test_parse_config_file(tmp_path):
    path = tmp_path / "bench.cfg"
    path.write_text(
        "# comment line\n"
        "n_side = 16   # trailing comment\n"
        "\n"
        "methods = poisson_map, reg_hg\n"
        "obj_rel_tol=1e-8\n"
    )
    assert parse_config_file(path) == {
        "n_side": "16",
        "methods": "poisson_map, reg_hg",
        "obj_rel_tol": "1e-8",
    }


def test_parse_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("n_side 16\n")
    with pytest.raises(ConfigError):
        parse_config_file(bad)
    with pytest.raises(ConfigError):
        parse_config_file(tmp_path / "missing.cfg")


def test_missing_config_file_exit_code(tmp_path, capsys):
    rc = cli_main(["mse-vs-counts", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_unknown_set_key_exit_code(tmp_path, capsys):
    rc = cli_main(["mse-vs-counts", "--set", "bogus=1", "--out", str(tmp_path)])
    assert rc == 1
    assert "bogus" in capsys.readouterr().err


def test_malformed_set_exit_code(tmp_path):
    rc = cli_main(["mse-vs-counts", "--set", "n_side", "--out", str(tmp_path)])
    assert rc == 1


def test_recon_requires_eps_for_epsilon_methods(tmp_path):
    rc = cli_main(
        ["recon", "--method", "pwls_plug_in", "--c", "10", "--tau", "1.0",
         "--out", str(tmp_path)] + TINY_ARGS
    )
    assert rc == 1


def test_recon_rejects_unknown_method(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli_main(["recon", "--method", "magic", "--c", "10", "--tau", "1.0"])
    assert exc.value.code == 2


def test_diag_props_command(tmp_path, capsys):
    rc = cli_main(["diag-props", "--out", str(tmp_path)])
    assert rc == 0
    assert "27 rows" in capsys.readouterr().out
    lines = (tmp_path / "diag_propositions.csv").read_text().splitlines()
    assert lines[0].startswith("family,gamma,mu,eps,")
    assert len(lines) == 28


def test_diag_props_csv_out_path(tmp_path, capsys):
    target = tmp_path / "r.csv"
    rc = cli_main(["diag-props", "--out", str(target)])
    assert rc == 0
    capsys.readouterr()
    lines = target.read_text().splitlines()
    assert lines[0].startswith("family,gamma,mu,eps,")
    assert len(lines) == 28


def test_resolution_scaling_command(tmp_path):
    rc = cli_main(["resolution-scaling", "--out", str(tmp_path)])
    assert rc == 0
    assert (tmp_path / "resolution_scaling.csv").exists()
    assert (tmp_path / "resolution_scaling_slopes.csv").exists()


def test_phantom_command_outputs_match(tmp_path):
    rc = cli_main(["phantom", "--out", str(tmp_path), "--set", "n_side=24"])
    assert rc == 0
    ref = shepp_logan(24).pixels
    from_csv = read_matrix_csv(tmp_path / "phantom.csv")
    from_bin = read_matrix_bin(tmp_path / "phantom.bin")
    assert np.array_equal(from_csv, ref)
    assert np.array_equal(from_bin, ref)
    sino_csv = read_matrix_csv(tmp_path / "sinogram.csv")
    sino_bin = read_matrix_bin(tmp_path / "sinogram.bin")
    assert np.array_equal(sino_csv, sino_bin)
    assert sino_csv.shape == (60, 34)  # default angles, ceil(sqrt(2) * 24) bins


def test_recon_command_deterministic(tmp_path, capsys):
    # hyphenated method names are accepted as aliases
    outputs = []
    for sub in ("a", "b"):
        args = [
            "recon", "--method", "poisson-map", "--c", "10", "--tau", "0.5",
            "--seed", "7", "--out", str(tmp_path / sub),
        ] + TINY_ARGS
        assert cli_main(args) == 0
        outputs.append((tmp_path / sub / "recon_poisson_map.bin").read_bytes())
        out = capsys.readouterr().out
        assert "mse_fov=" in out and "converged=True" in out
    assert outputs[0] == outputs[1]


def test_mse_vs_counts_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "n_side = 16\n"
        "num_angles = 10\n"
        "count_levels = 10\n"
        "methods = homoscedastic_ls\n"
        "tau_grid_points = 3\n"
        "tuning_seeds = 0\n"
        "test_seeds = 100, 101\n"
    )
    out = tmp_path / "results"
    rc = cli_main(
        ["mse-vs-counts", "--config", str(cfg), "--set", "test_seeds=100", "--seed", "5",
         "--out", str(out)]
    )
    assert rc == 0
    assert "1 summary rows" in capsys.readouterr().out
    lines = (out / "mse_vs_counts_cells.csv").read_text().splitlines()
    assert len(lines) == 2  # header + one test cell
    assert lines[1].split(",")[4] == "105"  # --set narrowed seeds, --seed shifted them


def test_tau_curve_command(tmp_path, capsys):
    rc = cli_main(
        ["tau-curve", "--out", str(tmp_path), "--set", "tau_grid=0.5,5"] + TINY_ARGS
    )
    assert rc == 0
    assert "2 curve points" in capsys.readouterr().out
    assert (tmp_path / "tau_curve_c10.csv").exists()


def test_eps_sensitivity_command_rejects_bad_methods(tmp_path, capsys):
    rc = cli_main(
        ["eps-sensitivity", "--out", str(tmp_path), "--set", "methods=poisson_map"]
    )
    assert rc == 1
    assert "eps-sensitivity" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "lowdose.cli", "diag-props", "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "27 rows" in proc.stdout


def test_console_script_help():
    proc = subprocess.run(["lowdose", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "mse-vs-counts" in proc.stdout
    assert "recon" in proc.stdout
