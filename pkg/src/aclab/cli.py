"""Scenario-driven command line: profile1d, solve, verify, levelset, sweep.

Scenarios are TOML files.  A minimal saddle scenario::

    potential = "quartic"

    [geometry]
    units = "absolute"     # or "widths": lengths in interface widths
    Lx = 10.0              # domain [-Lx, Lx] x [-Ly, Ly]; half-plane: [0, Lx]
    Ly = 10.0
    h = 0.05               # or hx / hy

    [boundary]
    kind = "fourend"       # planar | fourend | multiend | halfplane
    theta_deg = 45.0

    [checks.hamiltonian]
    tol_beta = 5e-3        # in units of beta

Every run writes into a fresh ``run-NNNN`` directory below ``--out``.
Exit codes: 0 pass, 1 check failure, 2 configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from . import identities as ident
from . import levelset as ls
from .errors import (AclabError, ConfigurationError, InvalidInputError, PotentialError,
                     SolverError, StructuralError)
from .potential import Potential
from .profile1d import energy_1d, solve_profile
from .solver2d import (Field2D, SolveConfig, add_noise, boundary_from_dict, build_boundary,
                       read_snapshot, relax, verify_margin, write_snapshot)

log = logging.getLogger("aclab")

EXIT_PASS, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

SECTIONS = {"potential", "geometry", "boundary", "profile", "solver", "checks", "output", "name"}
GEOMETRY_KEYS = {"units", "Lx", "Ly", "h", "hx", "hy"}
PROFILE_KEYS = {"L", "h", "tol"}
SOLVER_KEYS = {"tol", "max_iter", "flow_steps", "flow_switch", "flow_stall", "dt0", "dt_max",
               "divergence_window", "noise", "pin_angle"}
OUTPUT_KEYS = {"dir", "seed", "snapshot"}

# default per-check settings; tolerances scaled by beta are marked in the key name
CHECK_DEFAULTS = {
    "hamiltonian": {"enabled": True, "thetas_deg": [0.0, 90.0], "tol_beta": 5e-3, "n_slices": 41},
    "rho_star": {"enabled": False, "rel_tol": 0.01, "abs_tol_beta": 1e-3},
    "moment": {"enabled": True, "tol_beta": 2e-3, "recenter": True},
    "modica": {"enabled": True, "tol": 5e-3},
    "energy_curve": {"enabled": True, "n_radii": 20, "slack_beta": 1e-6, "expected_ends": None,
                     "tail_rel_tol": 0.10},
    "decay": {"enabled": True, "d_min": 2.0, "d_max": 6.0, "rel_tol": 0.10,
              "exclude_radius": None},
    "levelset": {"enabled": True, "expected_ends": None, "angle_tol_deg": 1.0,
                 "balance_tol": 0.05, "sine_tol_per_end": 0.05, "relation_tol_deg": 2.0,
                 "r_min": None, "r_max": None},
    "symmetry": {"enabled": False, "tol": 1e-3},
    "halfplane": {"enabled": False, "rms_h": 2.0, "antisym_deg": 2.0, "far_tol": 1e-3},
}


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ScenarioConfig:
    raw: dict
    potential: Potential
    boundary: object
    grid: Field2D
    profile: dict
    solver: SolveConfig
    noise: float
    checks: dict
    seed: int
    out_dir: Path
    base_dir: Path
    name: str = "scenario"
    units: str = "absolute"
    pin_angle: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def load_toml(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"scenario file not found: {path}", key="scenario") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}", key="scenario") from None


def _get(d, key, section, kind=float, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigurationError(f"missing required key '{section}.{key}'", key=f"{section}.{key}")
        return default
    try:
        return kind(d[key])
    except (TypeError, ValueError):
        raise ConfigurationError(f"'{section}.{key}' has invalid value {d[key]!r}",
                                 key=f"{section}.{key}") from None


def _check_keys(d, allowed, section):
    if not isinstance(d, dict):
        raise ConfigurationError(f"'{section}' must be a table", key=section)
    for k in d:
        if k not in allowed:
            raise ConfigurationError(f"unknown key '{section}.{k}'", key=f"{section}.{k}")


def _positive(value, key):
    if value is not None and not value > 0:
        raise ConfigurationError(f"'{key}' must be positive, got {value}", key=key)
    return value


def parse_config(raw: dict, base_dir=".", seed=None, out=None) -> ScenarioConfig:
    """Validate a scenario mapping and build the solver inputs."""
    base_dir = Path(base_dir)
    for k in raw:
        if k not in SECTIONS:
            raise ConfigurationError(f"unknown top-level key '{k}'", key=k)
    if "potential" not in raw:
        raise ConfigurationError("missing required key 'potential'", key="potential")
    try:
        pot = Potential.from_spec(raw["potential"], base_dir=base_dir)
    except (InvalidInputError, PotentialError, KeyError, OSError) as exc:
        raise ConfigurationError(f"invalid 'potential': {exc}", key="potential") from None

    geo = raw.get("geometry")
    if geo is None:
        raise ConfigurationError("missing required table 'geometry'", key="geometry")
    _check_keys(geo, GEOMETRY_KEYS, "geometry")
    units = geo.get("units", "absolute")
    if units not in ("absolute", "widths"):
        raise ConfigurationError(f"'geometry.units' must be 'absolute' or 'widths', got {units!r}",
                                 key="geometry.units")
    scale = pot.width if units == "widths" else 1.0
    Lx = _positive(_get(geo, "Lx", "geometry", required=True), "geometry.Lx") * scale
    Ly = _positive(_get(geo, "Ly", "geometry", default=geo.get("Lx")), "geometry.Ly") * scale
    h = _get(geo, "h", "geometry")
    hx = _get(geo, "hx", "geometry", default=h)
    hy = _get(geo, "hy", "geometry", default=h)
    if hx is None or hy is None:
        raise ConfigurationError("missing required key 'geometry.h'", key="geometry.h")
    hx = _positive(hx, "geometry.hx") * scale
    hy = _positive(hy, "geometry.hy") * scale

    bnd = raw.get("boundary")
    if bnd is None:
        raise ConfigurationError("missing required table 'boundary'", key="boundary")
    bnd = dict(bnd)
    if units == "widths":
        for k in ("offset", "intercept"):
            if k in bnd:
                bnd[k] = float(bnd[k]) * scale
        if "offsets" in bnd:
            bnd["offsets"] = [float(v) * scale for v in bnd["offsets"]]
    try:
        spec = boundary_from_dict(bnd)
    except ConfigurationError:
        raise
    except (InvalidInputError, KeyError, TypeError, ValueError) as exc:
        key = f"boundary.{exc.args[0]}" if isinstance(exc, KeyError) else "boundary"
        raise ConfigurationError(f"invalid boundary: {exc}", key=key) from None

    x_lo = 0.0 if getattr(spec, "neumann_left", False) else -Lx
    grid = Field2D.box((x_lo, Lx), (-Ly, Ly), hx=hx, hy=hy, potential_id=pot.id)

    prof = raw.get("profile", {})
    _check_keys(prof, PROFILE_KEYS, "profile")
    profile = {"L": _get(prof, "L", "profile", default=12.0),
               "h": _get(prof, "h", "profile", default=0.01),
               "tol": _get(prof, "tol", "profile", default=1e-10)}
    for k, v in profile.items():
        _positive(v, f"profile.{k}")

    sol = raw.get("solver", {})
    _check_keys(sol, SOLVER_KEYS, "solver")
    defaults = SolveConfig()
    solver = SolveConfig(
        tol=_positive(_get(sol, "tol", "solver", default=defaults.tol), "solver.tol"),
        max_iter=_positive(_get(sol, "max_iter", "solver", int, defaults.max_iter), "solver.max_iter"),
        flow_steps=_get(sol, "flow_steps", "solver", int, defaults.flow_steps),
        flow_switch=_positive(_get(sol, "flow_switch", "solver", default=defaults.flow_switch),
                              "solver.flow_switch"),
        flow_stall=_positive(_get(sol, "flow_stall", "solver", default=defaults.flow_stall),
                             "solver.flow_stall"),
        dt0=_positive(_get(sol, "dt0", "solver", default=defaults.dt0), "solver.dt0"),
        dt_max=_positive(_get(sol, "dt_max", "solver", default=defaults.dt_max), "solver.dt_max"),
        divergence_window=_positive(_get(sol, "divergence_window", "solver", int,
                                         defaults.divergence_window), "solver.divergence_window"),
    )
    noise = _get(sol, "noise", "solver", default=0.0)
    # four-end data through the origin: pin the fitted contact angle by default
    pinnable = type(spec).__name__ == "FourEnd" and not any(spec.offsets)
    pin_angle = bool(sol.get("pin_angle", pinnable and abs(spec.theta - math.pi / 4) > 1e-12))
    if pin_angle and not pinnable:
        raise ConfigurationError("'solver.pin_angle' needs fourend data with zero offsets",
                                 key="solver.pin_angle")
    if noise < 0:
        raise ConfigurationError("'solver.noise' must be >= 0", key="solver.noise")

    checks = copy.deepcopy(CHECK_DEFAULTS)
    if spec.__class__.__name__ == "Planar":
        checks["rho_star"]["enabled"] = True
        # the first moment drifts like -int u_x u_y, which is nonzero for tilted layers
        checks["moment"]["enabled"] = False
        checks["levelset"]["expected_ends"] = 2
    user_checks = raw.get("checks", {})
    _check_keys(user_checks, set(CHECK_DEFAULTS), "checks")
    for name, opts in user_checks.items():
        _check_keys(opts, set(CHECK_DEFAULTS[name]), f"checks.{name}")
        checks[name].update(opts)
        for k, v in opts.items():
            if ("tol" in k or k.endswith("_h") or k.endswith("_deg")) and isinstance(v, (int, float)) \
                    and not isinstance(v, bool) and k != "thetas_deg":
                _positive(v, f"checks.{name}.{k}")

    outcfg = raw.get("output", {})
    _check_keys(outcfg, OUTPUT_KEYS, "output")
    if seed is None:
        seed = _get(outcfg, "seed", "output", int, 0)
    out_dir = Path(out) if out is not None else base_dir / outcfg.get("dir", "runs")

    try:
        verify_margin(spec, grid, pot.width)
    except ConfigurationError as exc:
        raise ConfigurationError(str(exc), key=exc.key or "geometry") from None

    return ScenarioConfig(raw=raw, potential=pot, boundary=spec, grid=grid, profile=profile,
                          solver=solver, noise=noise, checks=checks, seed=int(seed),
                          out_dir=out_dir, base_dir=base_dir,
                          name=str(raw.get("name", "scenario")), units=units,
                          pin_angle=pin_angle)


def load_scenario(path, seed=None, out=None) -> ScenarioConfig:
    path = Path(path)
    return parse_config(load_toml(path), base_dir=path.parent, seed=seed, out=out)


def set_path(raw: dict, dotted: str, value) -> dict:
    """Copy of ``raw`` with the dotted key replaced; the key must already be meaningful."""
    out = copy.deepcopy(raw)
    parts = dotted.split(".")
    known = {"geometry": GEOMETRY_KEYS, "profile": PROFILE_KEYS, "solver": SOLVER_KEYS,
             "output": OUTPUT_KEYS}
    top = parts[0]
    if top == "boundary":
        ok = len(parts) == 2
    elif top in known:
        ok = len(parts) == 2 and parts[1] in known[top]
    elif top == "checks":
        ok = len(parts) == 3 and parts[1] in CHECK_DEFAULTS and parts[2] in CHECK_DEFAULTS[parts[1]]
    else:
        ok = False
    if not ok:
        raise ConfigurationError(f"unrecognized sweep parameter '{dotted}'", key=dotted)
    node = out
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# run directories and artifacts


def new_run_dir(root) -> Path:
    """Create the next ``run-NNNN`` directory; existing runs are never reused."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    taken = [int(p.name[4:]) for p in root.glob("run-*") if p.name[4:].isdigit()]
    k = max(taken, default=0) + 1
    while True:
        d = root / f"run-{k:04d}"
        try:
            d.mkdir()
            return d
        except FileExistsError:
            k += 1


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"not serializable: {type(obj)}")


def write_json(path, data) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(data), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)) and not math.isfinite(float(obj)):
        return None
    return obj


def _envelope(cfg: ScenarioConfig, grid: Field2D | None = None) -> dict:
    return {"version": __version__, "config_hash": cfg.config_hash, "seed": cfg.seed,
            "scenario": cfg.name, "potential": cfg.potential.id,
            "grid": (grid or cfg.grid).grid_meta(), "boundary": cfg.boundary.to_dict()}


# ---------------------------------------------------------------------------
# pipeline


def compute_profile(cfg: ScenarioConfig):
    return solve_profile(cfg.potential, L=cfg.profile["L"], h=cfg.profile["h"],
                         tol=cfg.profile["tol"])


def solve_field(cfg: ScenarioConfig, prof) -> Field2D:
    if cfg.pin_angle:
        pinned = ls.solve_contact_angle(cfg.boundary.theta, cfg.grid, cfg.potential, prof,
                                        cfg.solver, noise=cfg.noise, seed=cfg.seed, log=log.debug)
        f = pinned.field
        f.meta["pinning"] = pinned.to_dict()
        return f
    init = build_boundary(cfg.boundary, cfg.grid, prof)
    if cfg.noise:
        init = add_noise(init, cfg.noise, cfg.seed)
    return relax(init, cfg.potential, cfg.solver, log=log.debug)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None
    tol: float | None
    details: dict

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        v = "n/a" if self.value is None else f"{self.value:.6g}"
        t = "n/a" if self.tol is None else f"{self.tol:.3g}"
        return f"{status}  {self.name:<14s} value={v}  tol={t}"


def _zero_set_and_ends(f, p, opts, center=None):
    z = ls.extract_zero_set(f)
    ends = ls.fit_ends(z, r_min=opts.get("r_min"), r_max=opts.get("r_max"),
                       center=center, width=p.width) if z.polylines else []
    return z, ends


def run_checks(cfg: ScenarioConfig, f: Field2D, prof) -> list[CheckResult]:
    p, beta = cfg.potential, cfg.potential.beta
    spec = cfg.boundary
    C = cfg.checks
    results: list[CheckResult] = []
    center = f.center if not getattr(spec, "neumann_left", False) else (0.0, 0.0)

    def run(name, fn):
        try:
            results.append(fn())
        except AclabError as exc:
            results.append(CheckResult(name, False, None, None, {"error": f"{type(exc).__name__}: {exc}"}))

    if C["hamiltonian"]["enabled"] and not getattr(spec, "neumann_left", False):
        def ham():
            o = C["hamiltonian"]
            reps = [ident.hamiltonian_profile(f, p, theta=math.radians(t), n_slices=o["n_slices"],
                                              window="auto")
                    for t in o["thetas_deg"]]
            worst = max(r.max_abs_deviation for r in reps) / beta
            return CheckResult("hamiltonian", worst <= o["tol_beta"], worst, o["tol_beta"],
                               {"unit": "beta", "reports": [r.to_dict() for r in reps]})
        run("hamiltonian", ham)

    if C["rho_star"]["enabled"] and hasattr(spec, "theta") and spec.__class__.__name__ == "Planar":
        def rho_star():
            o = C["rho_star"]
            # rho is constant across slices, so the flux estimate is the window mean; a
            # slice lying along an untilted layer alone carries an O(length * h^2) defect
            rep = ident.hamiltonian_profile(f, p, theta=0.0, window="auto")
            rho = float(np.mean(rep.rho))
            expected = beta * math.sin(spec.theta)
            err = abs(rho - expected)
            tol = max(o["rel_tol"] * abs(expected), o["abs_tol_beta"] * beta)
            return CheckResult("rho_star", err <= tol, err, tol,
                               {"rho": rho, "rho_reference_slice": rep.reference,
                                "expected": expected})
        run("rho_star", rho_star)

    if C["moment"]["enabled"] and not getattr(spec, "neumann_left", False):
        def moment():
            o = C["moment"]
            c = ident.canonical_center(f, p) if o["recenter"] else f.center
            rep = ident.moment_profile(f, p, center=c, window="auto")
            v = rep.max_abs / beta
            return CheckResult("moment", v <= o["tol_beta"], v, o["tol_beta"],
                               {"unit": "beta", "center": c, "report": rep.to_dict()})
        run("moment", moment)

    if C["modica"]["enabled"]:
        def modica():
            o = C["modica"]
            r = ident.modica_check(f, p)
            return CheckResult("modica", r.max_violation <= o["tol"], r.max_violation, o["tol"],
                               r.to_dict())
        run("modica", modica)

    ends_cache = {}

    def ends():
        if "ends" not in ends_cache:
            ends_cache["z"], ends_cache["ends"] = _zero_set_and_ends(f, p, C["levelset"])
        return ends_cache["z"], ends_cache["ends"]

    if C["energy_curve"]["enabled"] and not getattr(spec, "neumann_left", False):
        def energy():
            o = C["energy_curve"]
            x1, x2, y1, y2 = f.extent
            rmax = min(center[0] - x1, x2 - center[0], center[1] - y1, y2 - center[1])
            radii = np.linspace(rmax / o["n_radii"], rmax, o["n_radii"])
            ec = ident.energy_curve(f, p, radii=radii, center=center)
            expected = o["expected_ends"]
            if expected is None:
                expected = len(spec.end_angles())
            tail_err = abs(ec.tail_mean - expected * beta) / (expected * beta)
            mono = ec.monotonicity_defect / beta
            ok = mono <= o["slack_beta"] and tail_err <= o["tail_rel_tol"]
            d = ec.to_dict()
            d.update(expected_ends=expected, tail_rel_error=tail_err, monotonicity_beta=mono)
            try:
                _, e = ends()
                if ec.end_count is not None and e:
                    d["levelset_end_count"] = len(e)
                    ok = ok and ec.end_count == len(e)
            except AclabError as exc:
                d["levelset_error"] = str(exc)
            return CheckResult("energy_curve", ok, tail_err, o["tail_rel_tol"], d)
        run("energy_curve", energy)

    if C["levelset"]["enabled"] and not getattr(spec, "neumann_left", False):
        def lvl():
            o = C["levelset"]
            z, e = ends()
            expected = o["expected_ends"] or len(spec.end_angles())
            d = {"n_ends": len(e), "ends": [r.to_dict() for r in e],
                 "interface_residual": ls.interface_residual(f, z)}
            ok = len(e) == expected
            if not ok:
                return CheckResult("levelset", False, float(len(e)), None, d)
            target = np.sort(np.mod(spec.end_angles(), 2 * math.pi))
            got = np.array([r.theta for r in e])
            err = max(abs(math.degrees(ls._wrap(a - b))) for a, b in zip(got, target))
            bal = ls.balance_defect(e)
            sine = ls.sine_sum_defect(e)
            d.update(angle_error_deg=err, balance_defect=bal, sine_sum_defect=sine)
            ok = err <= o["angle_tol_deg"] and bal <= o["balance_tol"] \
                and sine <= o["sine_tol_per_end"] * len(e)
            if len(e) in (2, 4):
                rel = ls.angle_relations(e)
                d["angle_relations"] = rel.to_dict()
                if len(e) == 4:
                    worst = math.degrees(max(rel.defect_12, rel.defect_13))
                    ok = ok and worst <= o["relation_tol_deg"]
            return CheckResult("levelset", ok, err, o["angle_tol_deg"], d)
        run("levelset", lvl)

    if C["decay"]["enabled"]:
        def decay():
            o = C["decay"]
            z, _ = (ends_cache["z"], None) if "z" in ends_cache else (ls.extract_zero_set(f), None)
            excl = o["exclude_radius"]
            if excl is None:
                excl = 0.0 if spec.__class__.__name__ == "Planar" else 4.0 * p.width
            fit = ident.decay_fit(f, z, d_min=o["d_min"], d_max=o["d_max"], center=center,
                                  exclude_radius=excl)
            target = p.decay_rate
            err = abs(fit.nu - target) / target
            d = fit.to_dict()
            d.update(target=target, rel_error=err)
            return CheckResult("decay", err <= o["rel_tol"], err, o["rel_tol"], d)
        run("decay", decay)

    if C["symmetry"]["enabled"]:
        def sym():
            o = C["symmetry"]
            c = ident.canonical_center(f, p)
            r = ls.symmetry_report(f, center=c)
            worst = max(r.x_defect, r.y_defect, r.monotone_x_defect, r.monotone_y_defect)
            return CheckResult("symmetry", worst <= o["tol"], worst, o["tol"], r.to_dict())
        run("symmetry", sym)

    if C["halfplane"]["enabled"] and getattr(spec, "neumann_left", False):
        def half():
            o = C["halfplane"]
            r = halfplane_diagnostics(f, p)
            h = max(f.hx, f.hy)
            ok = (r["fit"]["rms"] <= o["rms_h"] * h
                  and r["fit"]["slope_antisymmetry_deg"] <= o["antisym_deg"]
                  and r["far_defect"] <= o["far_tol"])
            return CheckResult("halfplane", ok, r["fit"]["rms"], o["rms_h"] * h, r)
        run("halfplane", half)

    return results


def halfplane_diagnostics(f: Field2D, p: Potential) -> dict:
    """Branch fit over the window clear of the Neumann wall and the far edge, and the
    value at the last interior node on y = 0."""
    margin = ident.WINDOW_WIDTHS * p.width
    x_max = f.extent[1]
    fit = ls.halfplane_branches(ls.extract_zero_set(f), margin, x_max - margin)
    j = int(np.argmin(np.abs(f.y)))
    far = float(f.values[j, -2])
    return {"fit": fit.to_dict(), "u_far": far, "far_defect": abs(1.0 - far)}


def scalar_diagnostics(results: list[CheckResult]) -> dict:
    """Flatten check results into scalar columns for sweep tables."""
    row = {}
    for r in results:
        row[f"{r.name}.pass"] = int(r.passed)
        row[f"{r.name}.value"] = r.value
        for k, v in r.details.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                row[f"{r.name}.{k}"] = v
            elif k == "angle_relations" and isinstance(v, dict):
                for kk, vv in v.items():
                    if isinstance(vv, (int, float)):
                        row[f"{r.name}.{kk}"] = vv
    return row


def _save_field(f: Field2D, run_dir: Path, cfg: ScenarioConfig, extra=None) -> Path:
    path = run_dir / "field.ac2"
    write_snapshot(f, path, extra={**_envelope(cfg, f), **(extra or {})})
    return path


def run_scenario(cfg: ScenarioConfig, run_dir: Path, snapshot=None) -> tuple[int, dict]:
    """profile -> boundary -> relax -> checks; writes snapshot, report.json and summary.txt."""
    prof = compute_profile(cfg)
    if snapshot is not None:
        f = read_snapshot(snapshot)
    else:
        try:
            f = solve_field(cfg, prof)
        except (SolverError, StructuralError) as exc:
            report = {**_envelope(cfg), "status": "solver_failure",
                      "error": f"{type(exc).__name__}: {exc}",
                      "history": getattr(exc, "history", [])}
            if getattr(exc, "field", None) is not None:
                _save_field(exc.field, run_dir, cfg, {"partial": True})
            write_json(run_dir / "report.json", report)
            (run_dir / "summary.txt").write_text(f"SOLVER FAILURE: {exc}\n")
            return EXIT_SOLVER, report
        _save_field(f, run_dir, cfg)
    results = run_checks(cfg, f, prof)
    passed = all(r.passed for r in results)
    report = {**_envelope(cfg, f), "status": "pass" if passed else "fail",
              "residual_max": f.residual_max, "solver": dict(f.meta),
              "checks": {r.name: {"passed": r.passed, "value": r.value, "tol": r.tol,
                                  **r.details} for r in results},
              "diagnostics": scalar_diagnostics(results)}
    report["solver"].pop("residual_history", None)
    write_json(run_dir / "report.json", report)
    lines = [f"scenario {cfg.name}  config {cfg.config_hash[:12]}  seed {cfg.seed}"]
    lines += [r.line() for r in results]
    lines.append("PASS" if passed else "FAIL")
    (run_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return (EXIT_PASS if passed else EXIT_CHECK), report


# ---------------------------------------------------------------------------
# subcommands


def cmd_profile1d(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed, out=args.out)
    run_dir = new_run_dir(cfg.out_dir)
    prof = compute_profile(cfg)
    prof.to_csv(run_dir / "profile.csv")
    p = cfg.potential
    summary = {**_envelope(cfg), "beta_num": energy_1d(prof, p), "beta": p.beta,
               "equipartition_residual": prof.equipartition_residual(p),
               "L": prof.half_length, "h": prof.h}
    write_json(run_dir / "profile.json", summary)
    print(f"beta_num={summary['beta_num']:.10f}  equipartition={summary['equipartition_residual']:.3g}"
          f"  -> {run_dir}")
    return EXIT_PASS


def cmd_solve(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed, out=args.out)
    run_dir = new_run_dir(cfg.out_dir)
    prof = compute_profile(cfg)
    try:
        f = solve_field(cfg, prof)
    except (SolverError, StructuralError) as exc:
        if getattr(exc, "field", None) is not None:
            _save_field(exc.field, run_dir, cfg, {"partial": True})
        write_json(run_dir / "solve.json", {**_envelope(cfg), "status": "solver_failure",
                                            "error": str(exc),
                                            "history": getattr(exc, "history", [])})
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _save_field(f, run_dir, cfg)
    meta = dict(f.meta)
    write_json(run_dir / "solve.json", {**_envelope(cfg, f), "status": "converged",
                                        "residual_max": f.residual_max, **meta})
    print(f"residual={f.residual_max:.3g}  -> {run_dir / 'field.ac2'}")
    return EXIT_PASS


def cmd_verify(args) -> int:
    cfg = load_scenario(args.scenario, seed=args.seed, out=args.out)
    run_dir = new_run_dir(cfg.out_dir)
    code, _ = run_scenario(cfg, run_dir, snapshot=args.snapshot)
    print(f"report -> {run_dir / 'report.json'}")
    return code


def cmd_levelset(args) -> int:
    if args.snapshot is None and args.scenario is None:
        raise ConfigurationError("levelset needs --snapshot or --scenario", key="snapshot")
    if args.snapshot is not None:
        f = read_snapshot(args.snapshot)
        out_root = Path(args.out) if args.out else Path(args.snapshot).parent
        env = {"version": __version__, "grid": f.grid_meta(), "snapshot": str(args.snapshot)}
    else:
        cfg = load_scenario(args.scenario, seed=args.seed, out=args.out)
        f = solve_field(cfg, compute_profile(cfg))
        out_root = cfg.out_dir
        env = _envelope(cfg, f)
    run_dir = new_run_dir(out_root)
    z = ls.extract_zero_set(f)
    z.to_csv(run_dir / "zeroset.csv")
    ends = ls.fit_ends(z, r_min=args.r_min, r_max=args.r_max) if z.polylines else []
    data = {**env, "n_polylines": len(z.polylines), "interface_residual": ls.interface_residual(f, z),
            "ends": [e.to_dict() for e in ends]}
    if len(ends) >= 2:
        data["balance_defect"] = ls.balance_defect(ends)
        data["sine_sum_defect"] = ls.sine_sum_defect(ends)
    if len(ends) in (2, 4):
        data["angle_relations"] = ls.angle_relations(ends).to_dict()
    write_json(run_dir / "ends.json", data)
    for e in ends:
        print(f"end theta={math.degrees(e.theta):8.3f} deg  offset={e.offset:+.4f}  rms={e.rms:.2e}")
    print(f"-> {run_dir}")
    return EXIT_PASS


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def _sweep_row(raw, base_dir, param, value, seed, row_dir):
    row = {"param": param, "value": value}
    try:
        cfg = parse_config(set_path(raw, param, value), base_dir=base_dir, seed=seed, out=row_dir)
        code, report = run_scenario(cfg, Path(row_dir))
        row["status"] = report.get("status")
        row["exit_code"] = code
        row.update(report.get("diagnostics", {}))
        if "residual_max" in report:
            row["residual_max"] = report["residual_max"]
        if cfg.boundary.__class__.__name__ == "Planar":
            row["planar_error"] = _planar_error(cfg, Path(row_dir) / "field.ac2")
    except ConfigurationError as exc:
        row.update(status="config_error", exit_code=EXIT_CONFIG, error=str(exc))
    except AclabError as exc:
        row.update(status="error", exit_code=EXIT_SOLVER, error=f"{type(exc).__name__}: {exc}")
    return row


def _planar_error(cfg, snapshot) -> float:
    """max |u - g(x cos t - y sin t - offset)| over the interior window, with g from a
    finely resolved 1D layer."""
    f = read_snapshot(snapshot)
    fine = solve_profile(cfg.potential, L=cfg.profile["L"], h=0.0025, tol=1e-10)
    t, off = cfg.boundary.theta, cfg.boundary.offset
    X, Y = f.mesh()
    exact = fine(X * math.cos(t) - Y * math.sin(t) - off)
    m = ident.WINDOW_WIDTHS * cfg.potential.width
    x1, x2, y1, y2 = f.extent
    win = (X >= x1 + m) & (X <= x2 - m) & (Y >= y1 + m) & (Y <= y2 - m)
    return float(np.max(np.abs(f.values - exact)[win]))


def cmd_sweep(args) -> int:
    path = Path(args.scenario)
    raw = load_toml(path)
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()] if args.values else []
    set_path(raw, args.param, None)  # validates the parameter name
    if values:
        parse_config(set_path(raw, args.param, values[0]), base_dir=path.parent, seed=args.seed,
                     out=args.out)
    out_root = Path(args.out) if args.out else path.parent / raw.get("output", {}).get("dir", "runs")
    run_dir = new_run_dir(out_root)
    row_dirs = []
    for k in range(len(values)):
        d = run_dir / f"row-{k:03d}"
        d.mkdir()
        row_dirs.append(d)
    jobs = [(raw, path.parent, args.param, v, args.seed, d) for v, d in zip(values, row_dirs)]
    if args.threads and args.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as ex:
            rows = list(ex.map(_sweep_row_star, jobs))
    else:
        rows = [_sweep_row(*j) for j in jobs]
    cols = ["param", "value", "status", "exit_code"]
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(run_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    write_json(run_dir / "sweep.json", {"version": __version__, "param": args.param,
                                        "values": values, "rows": rows})
    print(f"{len(rows)} rows -> {run_dir / 'sweep.csv'}")
    failed = [r for r in rows if r.get("exit_code") not in (EXIT_PASS,)]
    return EXIT_CHECK if failed else EXIT_PASS


def _sweep_row_star(job):
    return _sweep_row(*job)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aclab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        p.add_argument("--scenario", required=scenario_required, help="scenario TOML file")
        p.add_argument("--out", default=None, help="root directory for run-NNNN outputs")
        p.add_argument("--seed", type=int, default=None, help="seed for interior noise")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes (sweep runs scenarios concurrently)")

    p = sub.add_parser("profile1d", help="1D transition layer as CSV + JSON summary")
    common(p)
    p.set_defaults(fn=cmd_profile1d)
    p = sub.add_parser("solve", help="relax a scenario and write a snapshot")
    common(p)
    p.set_defaults(fn=cmd_solve)
    p = sub.add_parser("verify", help="solve and run all enabled checks")
    common(p)
    p.add_argument("--snapshot", default=None, help="verify an existing snapshot instead of solving")
    p.set_defaults(fn=cmd_verify)
    p = sub.add_parser("levelset", help="extract the zero set and fit ends")
    common(p, scenario_required=False)
    p.add_argument("--snapshot", default=None)
    p.add_argument("--r-min", type=float, default=None)
    p.add_argument("--r-max", type=float, default=None)
    p.set_defaults(fn=cmd_levelset)
    p = sub.add_parser("sweep", help="run a scenario over a list of parameter values")
    common(p)
    p.add_argument("--param", required=True, help="dotted config key, e.g. boundary.theta_deg")
    p.add_argument("--values", default="", help="comma-separated values (TOML literals)")
    p.set_defaults(fn=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigurationError as exc:
        key = f" [key: {exc.key}]" if getattr(exc, "key", None) else ""
        print(f"configuration error: {exc}{key}", file=sys.stderr)
        return EXIT_CONFIG
    except InvalidInputError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
