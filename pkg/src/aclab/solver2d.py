"""Allen-Cahn solves on truncated rectangles.

Far-field Dirichlet data come from the 1D layer: a single planar layer, or
a product of layers for configurations with several level-set ends.  The
half-plane variant replaces the edge x = 0 by a mirror (Neumann) condition.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.ndimage import map_coordinates

from .errors import (ConfigurationError, GeometryError, InvalidInputError, SolverDivergence,
                     SolverTimeout)
from .potential import Potential
from .profile1d import Profile1D

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# boundary specifications


@dataclass(frozen=True)
class Planar:
    """Single layer u = g(x cos(theta) - y sin(theta) - offset)."""

    theta: float
    offset: float = 0.0
    kind = "planar"
    neumann_left = False

    def ansatz(self, prof: Profile1D, x, y):
        return prof(x * math.cos(self.theta) - y * math.sin(self.theta) - self.offset)

    def end_angles(self):
        a = (math.pi / 2 - self.theta) % TWO_PI
        return sorted([a, (a + math.pi) % TWO_PI])

    def max_offset(self) -> float:
        return abs(self.offset)

    def to_dict(self):
        return {"kind": "planar", "theta": self.theta, "offset": self.offset}


@dataclass(frozen=True)
class MultiEnd:
    """Ends along rays at ``angles``; ray i lies on the line n_i . p = offsets[i]
    with n_i = (-sin, cos) the left normal of its direction.

    Sectors between consecutive rays alternate in sign, the one containing
    the positive x-axis being +1.
    """

    angles: tuple
    offsets: tuple = ()
    balance_tol: float = 0.05
    kind = "multiend"
    neumann_left = False

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        offsets = tuple(float(a) for a in self.offsets) or (0.0,) * len(angles)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "offsets", offsets)
        n = len(angles)
        if n < 2 or n % 2:
            raise ConfigurationError(f"need an even number of ends >= 2, got {n}", key="angles")
        if len(offsets) != n:
            raise ConfigurationError("offsets and angles differ in length", key="offsets")
        if any(not 0.0 <= a < TWO_PI for a in angles):
            raise ConfigurationError("end angles must lie in [0, 2pi)", key="angles")
        if any(b <= a for a, b in zip(angles, angles[1:])):
            raise ConfigurationError("end angles must be strictly increasing", key="angles")
        widths = np.diff(np.append(angles, angles[0] + TWO_PI))
        if np.any(widths >= math.pi):
            raise ConfigurationError("every sector between adjacent ends must be narrower than pi",
                                     key="angles")
        nu = np.array([[math.cos(a), math.sin(a)] for a in angles]).sum(axis=0)
        if np.hypot(*nu) > self.balance_tol:
            raise ConfigurationError(
                f"end directions are unbalanced: |sum nu_i| = {np.hypot(*nu):.3g}", key="angles")

    def sector_signs(self):
        n = len(self.angles)
        # sector j spans [angles[j], angles[j+1]); the last one wraps through 0
        start = n - 1 if self.angles[0] > 0 else 0
        return np.array([1.0 if (j - start) % 2 == 0 else -1.0 for j in range(n)])

    def ansatz(self, prof: Profile1D, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        angles = np.asarray(self.angles)
        offsets = np.asarray(self.offsets)
        phi = np.mod(np.arctan2(y, x), TWO_PI)
        n = len(angles)
        j = (np.searchsorted(angles, phi, side="right") - 1) % n
        k = (j + 1) % n
        s = self.sector_signs()[j]
        d_low = -np.sin(angles[j]) * x + np.cos(angles[j]) * y - offsets[j]
        d_up = -(-np.sin(angles[k]) * x + np.cos(angles[k]) * y - offsets[k])
        return s * prof(s * d_low) * prof(s * d_up)

    def end_angles(self):
        return list(self.angles)

    def max_offset(self) -> float:
        return max(abs(a) for a in self.offsets)

    def to_dict(self):
        return {"kind": "multiend", "angles": list(self.angles), "offsets": list(self.offsets)}


def _fourend_rays(theta):
    if not 0.0 < theta < math.pi / 2:
        raise ConfigurationError("four-end half contact angle must lie in (0, pi/2)", key="theta")
    return (theta, math.pi - theta, math.pi + theta, TWO_PI - theta)


@dataclass(frozen=True)
class FourEnd:
    """Saddle-type data: rays at theta, pi - theta, pi + theta, 2pi - theta."""

    theta: float
    offsets: tuple = (0.0, 0.0, 0.0, 0.0)
    kind = "fourend"
    neumann_left = False

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(float(a) for a in self.offsets))
        if len(self.offsets) != 4:
            raise ConfigurationError("fourend needs 4 offsets", key="offsets")
        self.as_multiend()

    def as_multiend(self) -> MultiEnd:
        return MultiEnd(_fourend_rays(self.theta), self.offsets)

    def ansatz(self, prof, x, y):
        return self.as_multiend().ansatz(prof, x, y)

    def end_angles(self):
        return list(_fourend_rays(self.theta))

    def max_offset(self) -> float:
        return max(abs(a) for a in self.offsets)

    @classmethod
    def translated(cls, theta, dx=0.0, dy=0.0):
        """Symmetric saddle data moved by (dx, dy)."""
        offs = tuple(-math.sin(a) * dx + math.cos(a) * dy for a in _fourend_rays(theta))
        return cls(theta, offs)

    def to_dict(self):
        return {"kind": "fourend", "theta": self.theta, "offsets": list(self.offsets)}


@dataclass(frozen=True)
class HalfPlane(FourEnd):
    """Four-end data on x >= 0 with u_x = 0 imposed on the edge x = 0."""

    kind = "halfplane"
    neumann_left = True

    def end_angles(self):
        return [self.theta, TWO_PI - self.theta]

    @classmethod
    def branches(cls, theta, intercept=0.0):
        """Data whose two branches follow y = +-(tan(theta) x + intercept)."""
        a = intercept * math.cos(theta)
        return cls(theta, (a, -a, a, -a))

    def to_dict(self):
        return {"kind": "halfplane", "theta": self.theta, "offsets": list(self.offsets)}


def boundary_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", None)
    if "theta_deg" in d:
        d["theta"] = math.radians(d.pop("theta_deg"))
    if "angles_deg" in d:
        d["angles"] = [math.radians(a) % TWO_PI for a in d.pop("angles_deg")]
    types = {"planar": Planar, "multiend": MultiEnd, "fourend": FourEnd, "halfplane": HalfPlane}
    if kind not in types:
        raise ConfigurationError(f"unknown boundary kind {kind!r}", key="boundary.kind")
    if kind == "halfplane" and "intercept" in d:
        return HalfPlane.branches(d["theta"], d.get("intercept", 0.0))
    try:
        if "offsets" in d:
            d["offsets"] = tuple(d["offsets"])
        if "angles" in d:
            d["angles"] = tuple(d["angles"])
        return types[kind](**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad boundary parameters: {exc}", key="boundary") from None


# ---------------------------------------------------------------------------
# fields


@dataclass(eq=False)
class Field2D:
    """Nodal values on a uniform grid; ``values[j, i]`` sits at (x0 + i hx, y0 + j hy)."""

    values: np.ndarray
    hx: float
    hy: float
    x0: float
    y0: float
    bc: object = None
    potential_id: str = ""
    residual_max: float = float("nan")
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 3:
            raise InvalidInputError("field needs at least a 3x3 grid")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("field contains non-finite values")

    @classmethod
    def box(cls, xlim, ylim, h=None, hx=None, hy=None, fill=0.0, **kw) -> "Field2D":
        hx = hx or h
        hy = hy or h
        nx = int(round((xlim[1] - xlim[0]) / hx)) + 1
        ny = int(round((ylim[1] - ylim[0]) / hy)) + 1
        hx = (xlim[1] - xlim[0]) / (nx - 1)
        hy = (ylim[1] - ylim[0]) / (ny - 1)
        return cls(np.full((ny, nx), float(fill)), hx, hy, float(xlim[0]), float(ylim[0]), **kw)

    @classmethod
    def from_function(cls, fn, xlim, ylim, h=None, hx=None, hy=None, **kw) -> "Field2D":
        f = cls.box(xlim, ylim, h=h, hx=hx, hy=hy, **kw)
        X, Y = f.mesh()
        f.values = np.asarray(fn(X, Y), dtype=float) * np.ones_like(X)
        return f

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]

    @property
    def x(self):
        return self.x0 + self.hx * np.arange(self.nx)

    @property
    def y(self):
        return self.y0 + self.hy * np.arange(self.ny)

    @property
    def extent(self):
        return (self.x0, self.x0 + self.hx * (self.nx - 1), self.y0, self.y0 + self.hy * (self.ny - 1))

    @property
    def center(self):
        x1, x2, y1, y2 = self.extent
        return 0.5 * (x1 + x2), 0.5 * (y1 + y2)

    def mesh(self):
        return np.meshgrid(self.x, self.y)

    def copy(self, values=None, **changes) -> "Field2D":
        vals = np.array(self.values if values is None else values, dtype=float)
        return replace(self, values=vals, meta=dict(self.meta), **changes)

    def interp(self, xq, yq):
        """Bilinear interpolation; points outside the grid raise GeometryError."""
        xq = np.asarray(xq, dtype=float)
        yq = np.asarray(yq, dtype=float)
        iq = (xq - self.x0) / self.hx
        jq = (yq - self.y0) / self.hy
        eps = 1e-9
        if np.any(iq < -eps) or np.any(iq > self.nx - 1 + eps) or \
                np.any(jq < -eps) or np.any(jq > self.ny - 1 + eps):
            raise GeometryError("interpolation point outside the grid")
        iq = np.clip(iq, 0, self.nx - 1)
        jq = np.clip(jq, 0, self.ny - 1)
        return map_coordinates(self.values, [jq, iq], order=1, mode="nearest")

    def gradient(self):
        """Centered differences (second-order one-sided at the edges): (u_x, u_y)."""
        uy, ux = np.gradient(self.values, self.hy, self.hx, edge_order=2)
        return ux, uy

    def grid_meta(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "hx": self.hx, "hy": self.hy,
                "x0": self.x0, "y0": self.y0}


# ---------------------------------------------------------------------------
# boundary data


def verify_margin(spec, grid: Field2D, width: float) -> None:
    """Every Dirichlet edge must sit at least 6 interface widths plus the
    largest end offset away from the origin; half-plane domains start at x = 0."""
    x1, x2, y1, y2 = grid.extent
    if spec.neumann_left and abs(x1) > 1e-9 * max(1.0, x2):
        raise ConfigurationError("half-plane domains must start at x = 0", key="geometry")
    need = 6.0 * width + spec.max_offset()
    edges = {"x_max": x2, "y_min": -y1, "y_max": y2}
    if not spec.neumann_left:
        edges["x_min"] = -x1
    for name, dist in edges.items():
        if dist < need:
            raise ConfigurationError(
                f"domain margin violated at {name}: distance {dist:.3g} from the origin, "
                f"need >= {need:.3g} (6 interface widths + max offset)", key="geometry")


def build_boundary(spec, grid: Field2D, prof: Profile1D, check_margin: bool = True) -> Field2D:
    """Ansatz field on ``grid``.

    Edge values are the Dirichlet data; interior values serve as the initial
    iterate.  See :func:`verify_margin` for the geometry rule.
    """
    if check_margin:
        verify_margin(spec, grid, 1.0 / prof.rate_plus)
    elif spec.neumann_left and abs(grid.extent[0]) > 1e-9 * max(1.0, grid.extent[1]):
        raise ConfigurationError("half-plane domains must start at x = 0", key="geometry")
    X, Y = grid.mesh()
    vals = np.clip(spec.ansatz(prof, X, Y), -1.0, 1.0)
    return grid.copy(values=vals, bc=spec, potential_id=prof.potential_id)


def with_boundary(f: Field2D, spec, prof: Profile1D, check_margin: bool = True) -> Field2D:
    """Warm start: interior values of ``f`` with the Dirichlet data of ``spec``."""
    data = build_boundary(spec, f, prof, check_margin=check_margin)
    vals = np.where(_free_mask(data), np.clip(f.values, -1.0, 1.0), data.values)
    return data.copy(values=vals)


def add_noise(f: Field2D, amplitude: float, seed: int) -> Field2D:
    """Uniform noise on the free nodes; Dirichlet edges keep their data."""
    rng = np.random.default_rng(seed)
    vals = f.values.copy()
    mask = _free_mask(f)
    vals[mask] += amplitude * rng.uniform(-1.0, 1.0, size=int(mask.sum()))
    out = f.copy(values=np.clip(vals, -1.0, 1.0))
    out.meta["noise"] = {"amplitude": amplitude, "seed": seed}
    return out


# ---------------------------------------------------------------------------
# discrete operator


def _free_mask(f: Field2D):
    mask = np.zeros(f.values.shape, dtype=bool)
    mask[1:-1, 1:-1] = True
    if getattr(f.bc, "neumann_left", False):
        mask[1:-1, 0] = True
    return mask


def _laplacian_rows(f: Field2D, mask):
    """Sparse rows of the 5-point Laplacian for the nodes in ``mask``.

    On a Neumann edge the mirror ghost u[j, -1] = u[j, 1] doubles the
    inward x-coupling.
    """
    ny, nx = f.values.shape
    J, I = np.nonzero(mask)
    rows = np.arange(J.size)
    k = J * nx + I
    cx, cy = 1.0 / f.hx ** 2, 1.0 / f.hy ** 2
    r_list = [rows, rows, rows, rows]
    c_list = [k, k + nx, k - nx, k + 1]
    v_list = [np.full(J.size, -2 * cx - 2 * cy), np.full(J.size, cy), np.full(J.size, cy),
              np.where(I == 0, 2 * cx, cx)]
    has_left = I > 0
    r_list.append(rows[has_left])
    c_list.append(k[has_left] - 1)
    v_list.append(np.full(int(has_left.sum()), cx))
    return sp.csr_matrix((np.concatenate(v_list), (np.concatenate(r_list), np.concatenate(c_list))),
                         shape=(J.size, nx * ny))


class _System:
    def __init__(self, f: Field2D, p: Potential):
        self.p = p
        self.mask = _free_mask(f)
        flat = self.mask.ravel()
        self.free = np.flatnonzero(flat)
        fixed = np.flatnonzero(~flat)
        rows = _laplacian_rows(f, self.mask)
        self.L = rows[:, self.free].tocsc()
        self.b = rows[:, fixed] @ f.values.ravel()[fixed]

    def residual(self, uf):
        return self.L @ uf + self.b - self.p.dF(uf)


def residual(f: Field2D, p: Potential) -> float:
    """max |Laplacian_h u - F'(u)| over the free nodes."""
    sys_ = _System(f, p)
    r = sys_.residual(f.values.ravel()[sys_.free])
    return float(np.max(np.abs(r))) if r.size else 0.0


# ---------------------------------------------------------------------------
# relaxation


@dataclass
class SolveConfig:
    tol: float = 1e-10
    max_iter: int = 40
    flow_steps: int = 60
    flow_switch: float = 2e-2
    flow_stall: float = 0.9
    dt0: float = 0.05
    dt_max: float = 1.0
    divergence_window: int = 50
    permc_spec: str = "MMD_AT_PLUS_A"

    def __post_init__(self):
        for name in ("tol", "dt0", "dt_max", "flow_switch"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"solver.{name} must be positive", key=f"solver.{name}")
        if not 0 < self.flow_stall <= 1:
            raise ConfigurationError("solver.flow_stall must lie in (0, 1]", key="solver.flow_stall")


def _finish(init, vals, rmax, history, flow_steps, newton_steps):
    out = init.copy(values=vals, residual_max=rmax)
    out.meta.update({"flow_steps": flow_steps, "newton_steps": newton_steps,
                     "residual_history": history})
    out.values.setflags(write=False)
    return out


def relax(init: Field2D, p: Potential, cfg: SolveConfig | None = None, log=None) -> Field2D:
    """Drive the free nodes to a root of Laplacian_h u - F'(u).

    A stabilised semi-implicit gradient flow (Laplacian and a constant
    shift implicit, F' explicit) removes rough components, then damped
    Newton finishes.  The flow hands over once the residual drops below
    ``flow_switch`` or a step reduces it by less than the factor
    ``flow_stall``: what remains is smooth, and continuing to flow would
    only drift away from saddle-type (unstable) solutions.  Dirichlet nodes
    are never touched.
    """
    cfg = cfg or SolveConfig()
    sys_ = _System(init, p)
    u = np.clip(init.values.copy(), -1.0, 1.0)
    flat = u.ravel()
    uf = flat[sys_.free].copy()
    r = sys_.residual(uf)
    rmax = float(np.max(np.abs(r)))
    history = [rmax]
    if rmax <= cfg.tol:
        return _finish(init, init.values.copy(), rmax, history, 0, 0)

    def pack(v):
        full = flat.copy()
        full[sys_.free] = v
        return full.reshape(u.shape)

    n = uf.size
    eye = sp.identity(n, format="csc")
    shift = p.curvature_bound
    factors = {}
    dt = cfg.dt0
    steps = 0
    rising = 0
    best = (rmax, uf.copy())
    while steps < cfg.flow_steps and rmax > cfg.flow_switch:
        if dt not in factors:
            factors[dt] = spla.splu((eye * (1.0 + dt * shift) - dt * sys_.L).tocsc(),
                                    permc_spec=cfg.permc_spec)
        rhs = uf + dt * (sys_.b - p.dF(uf) + shift * uf)
        uf = np.clip(factors[dt].solve(rhs), -1.0, 1.0)
        steps += 1
        r = sys_.residual(uf)
        new = float(np.max(np.abs(r)))
        stalled = False
        if new > rmax:
            rising += 1
            dt = max(cfg.dt0, dt / 2)
        else:
            rising = 0
            dt = min(cfg.dt_max, dt * 2)
            stalled = new > cfg.flow_stall * rmax
        rmax = new
        history.append(rmax)
        if rmax < best[0]:
            best = (rmax, uf.copy())
        if rising >= cfg.divergence_window:
            raise SolverDivergence(f"residual grew for {rising} consecutive steps",
                                   history=history, field=_finish(init, pack(best[1]), best[0],
                                                                  history, steps, 0))
        if stalled:
            break
    if log:
        log(f"flow: {steps} steps, residual {rmax:.3g}")

    newton = 0
    while rmax > cfg.tol and newton < cfg.max_iter:
        J = (sys_.L - sp.diags(p.d2F(uf))).tocsc()
        step = spla.splu(J, permc_spec=cfg.permc_spec).solve(-r)
        norm0 = np.linalg.norm(r)
        lam = 1.0
        while True:
            trial = np.clip(uf + lam * step, -1.0, 1.0)
            rt = sys_.residual(trial)
            if np.linalg.norm(rt) < (1.0 - 1e-4 * lam) * norm0 or lam < 1.0 / 1024:
                break
            lam *= 0.5
        uf, r = trial, rt
        rmax = float(np.max(np.abs(r)))
        newton += 1
        history.append(rmax)
        if rmax < best[0]:
            best = (rmax, uf.copy())
        if log:
            log(f"newton {newton}: residual {rmax:.3g} (step {lam:g})")
    if rmax > cfg.tol:
        raise SolverTimeout(f"no convergence after {newton} Newton steps (residual {rmax:.3g})",
                            history=history,
                            field=_finish(init, pack(best[1]), best[0], history, steps, newton))
    return _finish(init, pack(uf), rmax, history, steps, newton)


def solve(spec, grid: Field2D, p: Potential, prof: Profile1D, cfg: SolveConfig | None = None,
          noise: float = 0.0, seed: int = 0, log=None) -> Field2D:
    """build_boundary + optional interior noise + relax."""
    init = build_boundary(spec, grid, prof)
    if noise:
        init = add_noise(init, noise, seed)
    return relax(init, p, cfg, log=log)


# ---------------------------------------------------------------------------
# snapshots


def write_snapshot(f: Field2D, path, extra: dict | None = None) -> Path:
    """Header ``AC2 nx ny hx hy x0 y0 potential_id``, then little-endian float64
    values row by row, plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    pid = (f.potential_id or "unknown").replace(" ", "_")
    header = f"AC2 {f.nx} {f.ny} {f.hx!r} {f.hy!r} {f.x0!r} {f.y0!r} {pid}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    side = {"bc": f.bc.to_dict() if f.bc is not None else None,
            "residual_max": f.residual_max, "grid": f.grid_meta(), "potential_id": pid}
    side.update({k: v for k, v in f.meta.items() if k != "residual_history"})
    if extra:
        side.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(side, indent=2, default=float))
    return path


def read_snapshot(path) -> Field2D:
    path = Path(path)
    raw = path.read_bytes()
    end = raw.index(b"\n")
    parts = raw[:end].decode("ascii").split()
    if len(parts) != 8 or parts[0] != "AC2":
        raise InvalidInputError(f"{path} is not an AC2 snapshot")
    nx, ny = int(parts[1]), int(parts[2])
    hx, hy, x0, y0 = map(float, parts[3:7])
    body = raw[end + 1:]
    if len(body) != 8 * nx * ny:
        raise InvalidInputError(f"{path}: expected {nx * ny} values, found {len(body) // 8}")
    vals = np.frombuffer(body, dtype="<f8").reshape(ny, nx).copy()
    bc = None
    side = Path(str(path) + ".json")
    resid = float("nan")
    if side.exists():
        info = json.loads(side.read_text())
        if info.get("bc"):
            bc = boundary_from_dict(info["bc"])
        resid = float(info.get("residual_max", resid))
    return Field2D(vals, hx, hy, x0, y0, bc=bc, potential_id=parts[7], residual_max=resid)
