from __future__ import annotations

import csv
import json
import math
import subprocess
import sys

import pytest

from aclab import __version__
from aclab.cli import load_scenario, main, set_path
from aclab.errors import ConfigurationError

BETA = 2.0 * math.sqrt(2.0) / 3.0

PLANAR = """\
name = "small_planar"
potential = "quartic"

[geometry]
units = "absolute"
Lx = 8.0
Ly = 8.0
h = 0.1

[boundary]
kind = "planar"
theta_deg = {theta}
offset = 0.0

[checks.energy_curve]
enabled = false

# rows meet a steep layer at a shallow angle and would run out of window
[checks.hamiltonian]
thetas_deg = [0.0]
{extra}
"""


def scenario(tmp_path, text=None, name="s.toml", theta=90.0, extra=""):
    path = tmp_path / name
    path.write_text(text if text is not None else PLANAR.format(theta=theta, extra=extra))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def only_run(root):
    runs = sorted(root.glob("run-*"))
    assert runs, f"no run directory under {root}"
    return runs[-1]


# ---------------------------------------------------------------------------
# configuration errors -> exit 2


def test_missing_potential_names_the_key(tmp_path, capsys):
    path = scenario(tmp_path, PLANAR.format(theta=90.0, extra="").replace('potential = "quartic"\n', ""))
    assert run("verify", "--scenario", path, "--out", tmp_path / "o") == 2
    assert "potential" in capsys.readouterr().err


def test_malformed_toml(tmp_path, capsys):
    path = scenario(tmp_path, "potential = \n[geometry")
    assert run("solve", "--scenario", path, "--out", tmp_path / "o") == 2
    assert "configuration error" in capsys.readouterr().err


@pytest.mark.parametrize("extra,key", [
    ("[solver]\nspeed = 3\n", "speed"),
    ("[checks.modica]\ntol = -1.0\n", "checks.modica.tol"),
    ("[checks.bogus]\nenabled = true\n", "bogus"),
])
def test_unknown_or_invalid_keys(tmp_path, capsys, extra, key):
    path = scenario(tmp_path, extra=extra)
    assert run("verify", "--scenario", path, "--out", tmp_path / "o") == 2
    assert key in capsys.readouterr().err


def test_margin_violation_is_a_config_error(tmp_path, capsys):
    text = PLANAR.format(theta=90.0, extra="").replace("Lx = 8.0", "Lx = 3.0")
    assert run("solve", "--scenario", scenario(tmp_path, text), "--out", tmp_path / "o") == 2
    assert "geometry" in capsys.readouterr().err


def test_width_units_scale_lengths(tmp_path):
    text = PLANAR.format(theta=90.0, extra="").replace('"absolute"', '"widths"')
    cfg = load_scenario(scenario(tmp_path, text))
    w = 1 / math.sqrt(2.0)
    assert cfg.grid.extent[1] == pytest.approx(8.0 * w)
    assert cfg.grid.hx == pytest.approx(0.1 * w)


def test_set_path_validates_names():
    raw = {"geometry": {"h": 0.1}}
    assert set_path(raw, "geometry.h", 0.05)["geometry"]["h"] == 0.05
    assert raw["geometry"]["h"] == 0.1
    for bad in ("geometry.size", "nonsense", "checks.modica.speed"):
        with pytest.raises(ConfigurationError):
            set_path(raw, bad, 1)


# ---------------------------------------------------------------------------
# subcommands


def test_profile1d_outputs_and_append_only_runs(tmp_path):
    path = scenario(tmp_path)
    out = tmp_path / "o"
    assert run("profile1d", "--scenario", path, "--out", out) == 0
    assert run("profile1d", "--scenario", path, "--out", out) == 0
    runs = sorted(p.name for p in out.glob("run-*"))
    assert runs == ["run-0001", "run-0002"]
    summary = json.loads((out / "run-0001" / "profile.json").read_text())
    assert abs(summary["beta_num"] - BETA) <= 5e-4
    assert summary["version"] == __version__ and len(summary["config_hash"]) == 64
    assert (out / "run-0001" / "profile.csv").read_text().startswith("s,g,dg")


def test_solve_is_bitwise_deterministic(tmp_path):
    path = scenario(tmp_path, theta=60.0)
    out = tmp_path / "o"
    assert run("solve", "--scenario", path, "--out", out, "--seed", 3) == 0
    assert run("solve", "--scenario", path, "--out", out, "--seed", 3) == 0
    a, b = (out / "run-0001" / "field.ac2"), (out / "run-0002" / "field.ac2")
    assert a.read_bytes() == b.read_bytes()
    meta = json.loads((out / "run-0001" / "solve.json").read_text())
    assert meta["status"] == "converged" and meta["seed"] == 3


def test_verify_planar_passes_with_envelope(tmp_path):
    out = tmp_path / "o"
    assert run("verify", "--scenario", scenario(tmp_path, theta=60.0), "--out", out) == 0
    rd = only_run(out)
    report = json.loads((rd / "report.json").read_text())
    for key in ("version", "config_hash", "seed", "grid", "boundary"):
        assert key in report
    assert report["status"] == "pass"
    assert report["checks"]["rho_star"]["passed"]
    rho = report["checks"]["rho_star"]["rho"]
    assert rho == pytest.approx(BETA * math.sin(math.radians(60.0)), rel=0.01)
    assert (rd / "summary.txt").read_text().strip().endswith("PASS")


def test_verify_existing_snapshot(tmp_path):
    path = scenario(tmp_path)
    out = tmp_path / "o"
    assert run("solve", "--scenario", path, "--out", out) == 0
    snap = out / "run-0001" / "field.ac2"
    assert run("verify", "--scenario", path, "--out", out, "--snapshot", snap) == 0
    assert not (out / "run-0002" / "field.ac2").exists()


def test_impossible_tolerance_fails_checks(tmp_path):
    path = scenario(tmp_path, extra="[checks.modica]\ntol = 1e-30\n")
    out = tmp_path / "o"
    assert run("verify", "--scenario", path, "--out", out) == 1
    report = json.loads((only_run(out) / "report.json").read_text())
    assert report["status"] == "fail" and not report["checks"]["modica"]["passed"]


def test_solver_failure_keeps_partial_artifacts(tmp_path):
    path = scenario(tmp_path, theta=60.0, extra="[solver]\nmax_iter = 1\nflow_steps = 0\n")
    out = tmp_path / "o"
    assert run("verify", "--scenario", path, "--out", out) == 3
    rd = only_run(out)
    assert (rd / "field.ac2").exists()
    assert json.loads((rd / "report.json").read_text())["status"] == "solver_failure"


def test_levelset_from_snapshot(tmp_path):
    path = scenario(tmp_path, theta=60.0)
    out = tmp_path / "o"
    assert run("solve", "--scenario", path, "--out", out) == 0
    assert run("levelset", "--snapshot", out / "run-0001" / "field.ac2", "--out", tmp_path / "l") == 0
    data = json.loads((only_run(tmp_path / "l") / "ends.json").read_text())
    assert len(data["ends"]) == 2
    # u = g(x cos 60 - y sin 60): zero set y = x cot 60, ends along 30 and 210 degrees
    got = sorted(e["theta_deg"] for e in data["ends"])
    assert got[0] == pytest.approx(30.0, abs=0.5) and got[1] == pytest.approx(210.0, abs=0.5)
    assert data["interface_residual"] <= 1e-12


def test_levelset_needs_an_input(tmp_path):
    assert run("levelset", "--out", tmp_path) == 2


# ---------------------------------------------------------------------------
# sweeps


def read_rows(run_dir):
    with open(run_dir / "sweep.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_empty_sweep_writes_header_only(tmp_path):
    out = tmp_path / "o"
    assert run("sweep", "--scenario", scenario(tmp_path), "--out", out,
               "--param", "geometry.h", "--values", "") == 0
    lines = (only_run(out) / "sweep.csv").read_text().splitlines()
    assert lines == ["param,value,status,exit_code"]


def test_sweep_rejects_unknown_parameter(tmp_path, capsys):
    assert run("sweep", "--scenario", scenario(tmp_path), "--out", tmp_path / "o",
               "--param", "geometry.size", "--values", "1") == 2
    assert "geometry.size" in capsys.readouterr().err


def test_resolution_sweep_is_second_order(tmp_path):
    out = tmp_path / "o"
    assert run("sweep", "--scenario", scenario(tmp_path, theta=60.0), "--out", out,
               "--param", "geometry.h", "--values", "0.1,0.05,0.025") == 0
    rows = read_rows(only_run(out))
    errs = [float(r["planar_error"]) for r in rows]
    for coarse, fine in zip(errs, errs[1:]):
        assert 3.0 < coarse / fine < 5.0


def test_failed_row_does_not_stop_the_sweep(tmp_path):
    out = tmp_path / "o"
    code = run("sweep", "--scenario", scenario(tmp_path), "--out", out,
               "--param", "solver.max_iter", "--values", "1,200")
    assert code == 1
    rows = read_rows(only_run(out))
    assert [r["exit_code"] for r in rows] == ["3", "0"]


def test_parallel_sweep_matches_serial(tmp_path):
    base = scenario(tmp_path, theta=45.0)
    for threads, sub in ((1, "a"), (2, "b")):
        assert run("sweep", "--scenario", base, "--out", tmp_path / sub, "--threads", threads,
                   "--param", "boundary.theta_deg", "--values", "45.0,60.0") == 0
    ra = json.loads((only_run(tmp_path / "a") / "sweep.json").read_text())["rows"]
    rb = json.loads((only_run(tmp_path / "b") / "sweep.json").read_text())["rows"]
    assert len(ra) == len(rb) == 2
    for x, y in zip(ra, rb):
        assert x.keys() == y.keys()
        for k in x:
            if isinstance(x[k], float):
                assert x[k] == pytest.approx(y[k], abs=1e-12)
            else:
                assert x[k] == y[k]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "aclab", "--version"], capture_output=True,
                         text=True, check=True)
    assert __version__ in res.stdout
