"""Balanced double-well potentials F on [-1, 1].

A :class:`Potential` bundles F, F' and F'' together with the interior
critical point ``t0``.  The builtin quartic is ``F(u) = (1 - u^2)^2 / 4``;
user potentials come from polynomial coefficients or a tabulated file and
are checked on a dense scan before use.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import CubicSpline

from .errors import InvalidInputError, PotentialError, QuadratureError

CLAMP_TOL = 1e-12
SCAN_POINTS = 10_000


@dataclass(frozen=True, eq=False)
class Potential:
    kind: str
    t0: float
    f: Callable = field(repr=False)
    df: Callable = field(repr=False)
    d2f: Callable = field(repr=False)
    label: str = ""

    # -- construction -----------------------------------------------------

    @classmethod
    def quartic(cls, scale: float = 1.0) -> "Potential":
        if not scale > 0:
            raise InvalidInputError(f"quartic scale must be positive, got {scale}")
        s = float(scale)
        label = "quartic" if s == 1.0 else f"quartic*{s:g}"
        return cls(
            kind="quartic",
            t0=0.0,
            f=lambda u: 0.25 * s * (1.0 - u * u) ** 2,
            df=lambda u: s * (u * u * u - u),
            d2f=lambda u: s * (3.0 * u * u - 1.0),
            label=label,
        )

    @classmethod
    def polynomial(cls, coeffs, t0: float, label: str | None = None) -> "Potential":
        """F(u) = sum_k coeffs[k] u^k, validated as a balanced double well."""
        poly = Polynomial(np.asarray(coeffs, dtype=float))
        d1 = poly.deriv()
        d2 = d1.deriv()
        pot = cls(kind="polynomial", t0=float(t0), f=poly, df=d1, d2f=d2,
                  label=label or "poly")
        pot.validate()
        return pot

    @classmethod
    def from_table(cls, u, values, t0: float, label: str = "table") -> "Potential":
        u = np.asarray(u, dtype=float)
        values = np.asarray(values, dtype=float)
        if u.ndim != 1 or u.shape != values.shape or u.size < 5:
            raise PotentialError("table needs matching 1D columns with at least 5 rows")
        if not (np.isclose(u[0], -1.0) and np.isclose(u[-1], 1.0)):
            raise PotentialError("table must span exactly [-1, 1]")
        if np.any(np.diff(u) <= 0):
            raise PotentialError("table abscissas must be strictly increasing")
        # well bottoms are flat by assumption; clamp F'(+-1) = 0
        spline = CubicSpline(u, values, bc_type=((1, 0.0), (1, 0.0)))
        d1 = spline.derivative(1)
        d2 = spline.derivative(2)
        pot = cls(kind="table", t0=float(t0), f=spline, df=d1, d2f=d2, label=label)
        pot.validate()
        return pot

    @classmethod
    def from_file(cls, path, t0: float) -> "Potential":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append((float(row[0]), float(row[1])))
                except ValueError:
                    continue  # header line
        if not rows:
            raise PotentialError(f"no numeric rows in {path}")
        data = np.array(rows)
        return cls.from_table(data[:, 0], data[:, 1], t0, label=f"table:{Path(path).stem}")

    @classmethod
    def from_spec(cls, spec, base_dir=None) -> "Potential":
        """Build from a config value: ``"quartic"`` or a mapping with ``kind``."""
        if isinstance(spec, str):
            spec = {"kind": spec}
        if not isinstance(spec, dict) or "kind" not in spec:
            raise InvalidInputError("potential spec needs a 'kind'")
        kind = spec["kind"]
        if kind == "quartic":
            return cls.quartic(spec.get("scale", 1.0))
        if kind == "polynomial":
            return cls.polynomial(spec["coeffs"], spec.get("t0", 0.0))
        if kind == "table":
            path = Path(spec["file"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return cls.from_file(path, spec.get("t0", 0.0))
        raise InvalidInputError(f"unknown potential kind {kind!r}")

    # -- evaluation -------------------------------------------------------

    def _prepare(self, u):
        arr = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("potential evaluated at a non-finite value")
        excess = np.max(np.abs(arr)) - 1.0 if arr.size else 0.0
        if excess > CLAMP_TOL:
            warnings.warn(f"u outside [-1, 1] by {excess:.3g}; clamped", RuntimeWarning,
                          stacklevel=3)
        return np.clip(arr, -1.0, 1.0)

    def eval(self, order: int, u):
        fn = (self.f, self.df, self.d2f)[order] if order in (0, 1, 2) else None
        if fn is None:
            raise InvalidInputError(f"order must be 0, 1 or 2, got {order}")
        out = fn(self._prepare(u))
        return float(out) if np.ndim(out) == 0 else np.asarray(out, dtype=float)

    def F(self, u):
        return self.eval(0, u)

    def dF(self, u):
        return self.eval(1, u)

    def d2F(self, u):
        return self.eval(2, u)

    @property
    def id(self) -> str:
        return (self.label or self.kind).replace(" ", "_")

    @cached_property
    def well_curvature(self) -> tuple[float, float]:
        """(F''(-1), F''(1))."""
        return float(self.d2f(-1.0)), float(self.d2f(1.0))

    @property
    def decay_rate(self) -> float:
        """Linearised decay rate sqrt(F''(1)) of 1 - u near the +1 well."""
        return math.sqrt(self.well_curvature[1])

    @property
    def width(self) -> float:
        """Interface width 1/sqrt(F''(1)), the length unit for margins."""
        return 1.0 / self.decay_rate

    @cached_property
    def curvature_bound(self) -> float:
        s = np.linspace(-1.0, 1.0, 2001)
        return float(np.max(np.abs(self.d2f(s))))

    # -- derived quantities -------------------------------------------------

    def _root2f(self, s: float) -> float:
        return math.sqrt(max(2.0 * float(self.f(min(1.0, max(-1.0, s)))), 0.0))

    def G(self, t: float, tol: float = 1e-10) -> float:
        """G(t) = int_{-1}^t sqrt(2F(s)) ds by adaptive Simpson."""
        t = float(t)
        if not math.isfinite(t):
            raise InvalidInputError("G evaluated at a non-finite value")
        if t < -1.0 - CLAMP_TOL or t > 1.0 + CLAMP_TOL:
            raise InvalidInputError(f"G needs t in [-1, 1], got {t}")
        t = min(1.0, max(-1.0, t))
        if t == -1.0:
            return 0.0
        return adaptive_simpson(self._root2f, -1.0, t, tol)

    @cached_property
    def beta(self) -> float:
        """Interface energy int_{-1}^{1} sqrt(2F)."""
        return self.G(1.0)

    # -- validation ---------------------------------------------------------

    def validate(self, n: int = SCAN_POINTS) -> None:
        """Check the balanced double-well structure on an n-point scan."""
        t0 = self.t0
        if not -1.0 < t0 < 1.0:
            raise PotentialError(f"t0 must lie in (-1, 1), got {t0}")
        fm, fp = float(self.f(-1.0)), float(self.f(1.0))
        if abs(fm) > 1e-10 or abs(fp) > 1e-10:
            raise PotentialError(f"F(+-1) must vanish, got F(-1)={fm:g}, F(1)={fp:g}")
        dm, dp = float(self.df(-1.0)), float(self.df(1.0))
        if abs(dm) > 1e-8 or abs(dp) > 1e-8:
            raise PotentialError(f"F'(+-1) must vanish, got {dm:g}, {dp:g}")
        cm, cp = self.well_curvature
        if not (cm > 0 and cp > 0):
            raise PotentialError(f"F''(+-1) must be positive, got {cm:g}, {cp:g}")
        d0 = float(self.df(t0))
        if abs(d0) > 1e-10:
            raise PotentialError(f"F'(t0) = {d0:g} is not zero; t0={t0} is not the critical point")
        s = np.linspace(-1.0, 1.0, n)[1:-1]
        if np.any(self.f(s) <= 0):
            bad = s[np.argmin(self.f(s))]
            raise PotentialError(f"F must be positive inside (-1, 1); fails near u={bad:.4f}")
        away = np.abs(s - t0) > 1e-9
        d = self.df(s)
        left = (s < t0) & away
        right = (s > t0) & away
        if np.any(d[left] <= 0) or np.any(d[right] >= 0):
            raise PotentialError("F' sign pattern violates the double-well structure")


def adaptive_simpson(fn, a: float, b: float, tol: float = 1e-10, max_depth: int = 40) -> float:
    """Adaptive Simpson quadrature with an absolute error target.

    Raises QuadratureError when some subinterval hits ``max_depth`` without
    meeting its share of the tolerance.
    """
    fa, fb = fn(a), fn(b)
    m = 0.5 * (a + b)
    fm = fn(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    total = 0.0
    worst = 0.0
    failed = False
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a_, b_, fa_, fm_, fb_, s_, tol_, depth = stack.pop()
        m_ = 0.5 * (a_ + b_)
        lm, rm = 0.5 * (a_ + m_), 0.5 * (m_ + b_)
        flm, frm = fn(lm), fn(rm)
        left = (m_ - a_) / 6.0 * (fa_ + 4.0 * flm + fm_)
        right = (b_ - m_) / 6.0 * (fm_ + 4.0 * frm + fb_)
        err = left + right - s_
        if abs(err) <= 15.0 * tol_ or depth >= max_depth:
            if abs(err) > 15.0 * tol_:
                failed = True
            worst += abs(err) / 15.0
            total += left + right + err / 15.0
            continue
        stack.append((a_, m_, fa_, flm, fm_, left, 0.5 * tol_, depth + 1))
        stack.append((m_, b_, fm_, frm, fb_, right, 0.5 * tol_, depth + 1))
    if failed:
        raise QuadratureError(f"adaptive Simpson did not converge; estimated error {worst:.3g}",
                              achieved=worst)
    return total
