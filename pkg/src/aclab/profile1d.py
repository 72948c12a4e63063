"""Heteroclinic transition layer g'' = F'(g) on a truncated line."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from .errors import InvalidInputError, QualitativeFailure, SolverError
from .potential import Potential


@dataclass(frozen=True, eq=False)
class Profile1D:
    """Samples of g and g' on the uniform grid s = -L..L.

    Calling the profile evaluates g anywhere on the real line: a cubic
    spline inside [-L, L] and exponential tails towards the wells outside.
    """

    s: np.ndarray
    g: np.ndarray
    dg: np.ndarray
    rate_minus: float = math.sqrt(2.0)
    rate_plus: float = math.sqrt(2.0)
    potential_id: str = ""

    def __post_init__(self):
        for name in ("s", "g", "dg"):
            arr = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"profile {name} has non-finite samples")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_spline", CubicSpline(self.s, self.g))

    @property
    def half_length(self) -> float:
        return float(self.s[-1])

    @property
    def h(self) -> float:
        return float(self.s[1] - self.s[0])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.s[0], self.s[-1]
        out = self._spline(np.clip(x, lo, hi))
        gp, gm = self.g[-1], self.g[0]
        above = x > hi
        below = x < lo
        if np.any(above):
            out = np.where(above, 1.0 - (1.0 - gp) * np.exp(-self.rate_plus * (x - hi)), out)
        if np.any(below):
            out = np.where(below, -1.0 + (gm + 1.0) * np.exp(-self.rate_minus * (lo - x)), out)
        return np.clip(out, -1.0, 1.0)

    def equipartition_residual(self, p: Potential) -> float:
        return float(np.max(np.abs(0.5 * self.dg ** 2 - p.F(self.g))))

    def to_csv(self, path) -> None:
        data = np.column_stack([self.s, self.g, self.dg])
        np.savetxt(path, data, delimiter=",", header="s,g,dg", comments="", fmt="%.17g")


def _newton_profile(p, s, h, left, right, g, tol, max_iter=200):
    inner = g[1:-1].copy()
    history = []

    def residual(v):
        full = np.concatenate(([left], v, [right]))
        return (full[:-2] - 2.0 * full[1:-1] + full[2:]) / (h * h) - p.dF(v)

    r = residual(inner)
    history.append(float(np.max(np.abs(r))))
    for _ in range(max_iter):
        if history[-1] <= tol:
            return np.concatenate(([left], inner, [right])), history
        n = inner.size
        ab = np.zeros((3, n))
        ab[0, 1:] = 1.0 / (h * h)
        ab[1, :] = -2.0 / (h * h) - p.d2F(inner)
        ab[2, :-1] = 1.0 / (h * h)
        step = solve_banded((1, 1), ab, -r)
        norm0 = np.linalg.norm(r)
        lam = 1.0
        while lam > 1e-4:
            trial = np.clip(inner + lam * step, -1.0, 1.0)
            rt = residual(trial)
            if np.linalg.norm(rt) < (1.0 - 1e-4 * lam) * norm0:
                break
            lam *= 0.5
        inner, r = trial, rt
        history.append(float(np.max(np.abs(r))))
    if history[-1] <= tol:
        return np.concatenate(([left], inner, [right])), history
    raise SolverError(f"profile Newton did not converge in {max_iter} iterations "
                      f"(residual {history[-1]:.3g})", history=history)


def solve_profile(p: Potential, L: float = 12.0, h: float = 0.01, tol: float = 1e-10) -> Profile1D:
    """Monotone layer from -1 to 1 with g(0) = 0.

    Dirichlet values sit at the linearised distance from the wells,
    ``1 - exp(-sqrt(F''(1)) L)`` on the right and the mirror on the left.
    """
    if L < 8:
        raise InvalidInputError(f"half-length L must be >= 8, got {L}")
    if not 0 < h <= 0.05:
        raise InvalidInputError(f"step h must lie in (0, 0.05], got {h}")
    if tol < 1e-12:
        raise InvalidInputError(f"tol must be >= 1e-12, got {tol}")
    n = int(round(2 * L / h))
    s = np.linspace(-L, L, n + 1)
    h = float(s[1] - s[0])
    cm, cp = p.well_curvature
    right = 1.0 - math.exp(-math.sqrt(cp) * L)
    left = -1.0 + math.exp(-math.sqrt(cm) * L)
    guess = np.tanh(s * math.sqrt(cp) / 2.0)
    guess[0], guess[-1] = left, right
    g, _ = _newton_profile(p, s, h, left, right, guess, tol)

    if np.any(np.diff(g) < -1e-12):
        raise QualitativeFailure("profile solution is not monotone")
    spline = CubicSpline(s, g)
    k = int(np.searchsorted(g, 0.0))
    shift = brentq(spline, s[k - 1], s[k], xtol=1e-15)
    g_new = spline(np.clip(s + shift, -L, L))
    dg_new = spline(np.clip(s + shift, -L, L), 1)
    # re-sampling past the truncation edge falls back to the boundary values
    g_new = np.where(s + shift > L, right, np.where(s + shift < -L, left, g_new))
    dg_new = np.where((s + shift > L) | (s + shift < -L), 0.0, dg_new)
    return Profile1D(s, g_new, dg_new, rate_minus=math.sqrt(cm), rate_plus=math.sqrt(cp),
                     potential_id=p.id)


def energy_1d(prof: Profile1D, p: Potential) -> float:
    """Trapezoid value of int (g'^2/2 + F(g)) ds."""
    dens = 0.5 * prof.dg ** 2 + p.F(prof.g)
    return float(np.trapezoid(dens, prof.s))
