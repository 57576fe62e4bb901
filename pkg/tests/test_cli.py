import filecmp
import subprocess
import sys

import numpy as np
import pytest

from sinkflow import cli
from sinkflow.errors import CFLViolation

SMALL = (cli.bundled_scenario("reference").read_text()
         .replace("grid_n = 128", "grid_n = 32").replace("T = 1.0", "T = 0.2")
         .replace("nu = [4e-3, 2e-3, 1e-3, 5e-4]", "nu = [1e-3]").replace("stride = 10", "stride = 4"))


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(SMALL)
    return p


def test_run_writes_output_tree(tmp_path, small):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(small), "--out", str(out)]) == cli.EXIT_OK
    assert (out / "manifest.txt").read_text().startswith("sinkflow ")
    nd = out / "nu_0.001"
    for name in ("circulations.csv", "budgets/lp_1.csv", "budgets/lp_2.csv", "budgets/lp_4.csv",
                 "budgets/gauge.csv", "budgets/mass_ledger.csv", "reports/run.txt"):
        assert (nd / name).is_file(), name
    assert sorted(p.name for p in (nd / "fields").glob("*.f64"))[0] == "omega_00000.f64"
    circ = np.loadtxt(nd / "circulations.csv", delimiter=",", skiprows=1)
    assert circ.shape[1] == 5 and circ[0, 0] == 0.0
    assert (nd / "circulations.csv").read_text().splitlines()[0] == "t,C_1,C_2,C_outer,residual"


def test_zero_scenario_run(tmp_path):
    out = tmp_path / "z"
    assert cli.main(["run", "--scenario", str(cli.bundled_scenario("zero")), "--grid", "32",
                     "--out", str(out)]) == cli.EXIT_OK
    data = np.loadtxt(out / "nu_0.001" / "circulations.csv", delimiter=",", skiprows=1)
    assert np.all(data[:, 1:] == 0)


def test_nu_override(tmp_path, small):
    out = tmp_path / "o"
    assert cli.main(["run", "--scenario", str(small), "--out", str(out), "--nu", "2e-3,0"]) == 0
    assert (out / "nu_0.002").is_dir() and (out / "nu_0").is_dir()


def test_parse_errors_exit_2(tmp_path, small):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("radius = 3.0", "radius = = 3.0"))
    assert cli.main(["run", "--scenario", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_PARSE
    assert cli.main(["run", "--scenario", str(tmp_path / "missing.toml")]) == cli.EXIT_PARSE
    assert cli.main(["run", "--scenario", str(small), "--nu", "abc"]) == cli.EXIT_PARSE
    assert cli.main(["frobnicate"]) == cli.EXIT_PARSE


def test_validation_error_exit_3(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMALL.replace("flux = -2.0", "flux = 2.0"))
    assert cli.main(["run", "--scenario", str(bad), "--out", str(tmp_path / "x")]) == cli.EXIT_VALIDATION


def test_solver_failure_exit_4(tmp_path, small, monkeypatch):
    from sinkflow import transport

    def boom(*args, **kwargs):
        raise CFLViolation("forced")

    monkeypatch.setattr(transport, "viscous_step", boom)
    out = tmp_path / "f"
    assert cli.main(["run", "--scenario", str(small), "--out", str(out)]) == cli.EXIT_SOLVER
    assert "CFLViolation" in (out / "nu_0.001" / "reports" / "run.txt").read_text()


def test_failed_assertions_exit_5(tmp_path, small):
    code = cli.main(["check", "--scenario", str(small), "--out", str(tmp_path / "c"), "--tol-scale", "1e-9"])
    assert code == cli.EXIT_ASSERTION
    assert "FAIL" in (tmp_path / "c" / "nu_0.001" / "reports" / "check.txt").read_text()


def test_check_passes(tmp_path, small):
    assert cli.main(["check", "--scenario", str(small), "--out", str(tmp_path / "c"), "--grid", "48"]) == 0


def test_dlvp_command(tmp_path):
    assert cli.main(["dlvp", "--out", str(tmp_path / "d")]) == cli.EXIT_OK
    assert (tmp_path / "d" / "gauge.csv").is_file()


def test_kernel_command(tmp_path):
    assert cli.main(["kernel", "--grid", "48", "--out", str(tmp_path / "k")]) == cli.EXIT_OK
    assert (tmp_path / "k" / "reports" / "scan.csv").is_file()


def test_halfplane_oracle():
    dev, fd_dev, tang = cli.halfplane_oracle()
    assert dev <= 1e-12 and tang == 0.0 and fd_dev < 1e-6


def test_threads_from_env(monkeypatch):
    args = cli.build_parser().parse_args(["run"])
    assert cli._threads(args) == 1
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli._threads(args) == 3
    args = cli.build_parser().parse_args(["run", "--threads", "2"])
    assert cli._threads(args) == 2
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert cli.main(["run", "--scenario", "nowhere.toml"]) == cli.EXIT_PARSE


def test_sweep_output_independent_of_threads(tmp_path, small, monkeypatch):
    base = ["sweep", "--scenario", str(small), "--nu", "2e-3,1e-3,5e-4"]
    assert cli.main(base + ["--out", str(tmp_path / "a"), "--threads", "1"]) in (0, cli.EXIT_ASSERTION)
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    assert cli.main(base + ["--out", str(tmp_path / "b")]) in (0, cli.EXIT_ASSERTION)
    assert filecmp.cmp(tmp_path / "a" / "sweep.csv", tmp_path / "b" / "sweep.csv", shallow=False)


def test_runs_bitwise_reproducible(tmp_path, small):
    for name in ("a", "b"):
        assert cli.main(["run", "--scenario", str(small), "--out", str(tmp_path / name)]) == 0
    for rel in ("circulations.csv", "fields/omega_00000.f64", "budgets/lp_2.csv"):
        assert filecmp.cmp(tmp_path / "a" / "nu_0.001" / rel, tmp_path / "b" / "nu_0.001" / rel, shallow=False)
    last = sorted((tmp_path / "a" / "nu_0.001" / "fields").glob("*.f64"))[-1].name
    assert filecmp.cmp(tmp_path / "a" / "nu_0.001" / "fields" / last,
                       tmp_path / "b" / "nu_0.001" / "fields" / last, shallow=False)


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "sinkflow.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("sinkflow ")
