"""Conserved quantities and inequalities evaluated on converged fields."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import linregress

from .errors import GeometryError, InsufficientDataError
from .potential import Potential
from .solver2d import Field2D

WINDOW_WIDTHS = 6.0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class _Report:
    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class HamiltonianReport(_Report):
    theta: float
    positions: np.ndarray
    rho: np.ndarray
    reference: float
    max_abs_deviation: float
    window: tuple
    half_length: float


@dataclass
class MomentReport(_Report):
    theta: float
    positions: np.ndarray
    moment: np.ndarray
    rho: np.ndarray
    reference: float
    max_abs_deviation: float
    max_abs: float
    center: tuple


@dataclass
class ModicaResult(_Report):
    max_violation: float
    location: tuple
    max_excess: float


@dataclass
class EnergyCurve(_Report):
    radii: np.ndarray
    energies: np.ndarray
    ratios: np.ndarray
    beta: float
    center: tuple
    tail_mean: float
    tail_slope: float
    end_count: int | None
    monotonicity_defect: float


@dataclass
class DecayFit(_Report):
    nu: float
    C: float
    r2: float
    n_nodes: int
    d_range: tuple = field(default=(2.0, 6.0))


# ---------------------------------------------------------------------------
# slice integrals


def _axis_index(theta):
    k = round(theta / (math.pi / 2))
    return k % 4 if abs(theta - k * math.pi / 2) < 1e-12 else None


def _frame(theta):
    """Unit vectors of the slice direction z1 and the slice normal z2 in (x, y)."""
    k = _axis_index(theta)
    if k is not None:
        s, c = (0, 1, 0, -1)[k], (1, 0, -1, 0)[k]
    else:
        s, c = math.sin(theta), math.cos(theta)
    return np.array([s, c], dtype=float), np.array([c, -s], dtype=float)


def _crossings_clear(f, along_x, margin):
    """Per slice: every sign change of u lies at least ``margin`` (measured
    normal to the level set) from both slice ends.  Along the slice that is
    margin / sin(alpha), alpha being the crossing angle.  Crossings where the
    gradient nearly vanishes (junctions of several ends) have no defined
    angle and sit well inside the domain; they are not constraints."""
    ux, uy = f.gradient()
    u, gt = (f.values, ux) if along_x else (f.values.T, uy.T)
    gn = np.hypot(ux, uy) if along_x else np.hypot(ux, uy).T
    t = f.x if along_x else f.y
    sign = u > 0
    # a slice lying inside the level set carries rounding noise, not crossings
    tiny = 1e-10 * max(float(np.max(np.abs(u))), 1.0)
    change = (sign[:, 1:] != sign[:, :-1]) & (np.maximum(np.abs(u[:, 1:]), np.abs(u[:, :-1])) > tiny)
    change &= (gn[:, :-1] + gn[:, 1:]) > 0.2 * float(np.max(gn))
    mid = 0.5 * (t[1:] + t[:-1])
    sin_a = np.abs(gt[:, :-1] + gt[:, 1:]) / np.maximum(gn[:, :-1] + gn[:, 1:], 1e-300)
    need = margin / np.maximum(sin_a, 1e-3)
    gap = np.minimum(mid - t[0], t[-1] - mid)[None, :]
    return ~np.any(change & (gap < need), axis=1)


def _run_around(mask, k):
    """Contiguous run of True entries containing index k (empty if mask[k] is False)."""
    out = np.zeros_like(mask)
    if not mask[k]:
        return out
    lo = hi = k
    while lo > 0 and mask[lo - 1]:
        lo -= 1
    while hi < mask.size - 1 and mask[hi + 1]:
        hi += 1
    out[lo:hi + 1] = True
    return out


def _slice_integrals(f, p, theta, n_slices, margin, half_length, window, center, positions=None):
    """rho(z2) = int [F + u_{z1}^2/2 - u_{z2}^2/2] dz1 and its first z1-moment.

    Coordinates: x = cx + z1 sin(theta) + z2 cos(theta),
                 y = cy + z1 cos(theta) - z2 sin(theta).
    """
    cx, cy = center if center is not None else f.center
    x1, x2, y1, y2 = f.extent
    e1, e2 = _frame(theta)
    if margin is None:
        margin = WINDOW_WIDTHS * p.width
    axis = _axis_index(theta)
    ux, uy = f.gradient()

    if axis is not None:
        along_x = axis in (1, 3)  # slices are grid rows
        if along_x:
            coords_n, coords_t = f.y, f.x
            c_n, c_t = cy, cx
            lo_n, hi_n = y1, y2
        else:
            coords_n, coords_t = f.x, f.y
            c_n, c_t = cx, cy
            lo_n, hi_n = x1, x2
        sign_n = e2[1] if along_x else e2[0]
        sign_t = e1[0] if along_x else e1[1]
        z2_nodes = sign_n * (coords_n - c_n)
        if window is None or isinstance(window, str):
            inside = (coords_n >= lo_n + margin - 1e-9) & (coords_n <= hi_n - margin + 1e-9)
            if window == "auto":
                inside &= _crossings_clear(f, along_x, margin)
                inside = _run_around(inside, int(np.argmin(np.abs(z2_nodes))))
        else:
            inside = (z2_nodes >= window[0] - 1e-9) & (z2_nodes <= window[1] + 1e-9)
        idx = np.flatnonzero(inside)
        if idx.size == 0:
            raise GeometryError("interior window is empty; enlarge the domain or reduce the margin")
        if positions is not None:
            want = np.asarray(positions, dtype=float)
            pick = np.unique([idx[np.argmin(np.abs(z2_nodes[idx] - z))] for z in want])
        else:
            pick = idx[np.unique(np.round(np.linspace(0, idx.size - 1, n_slices)).astype(int))]
            ref = idx[np.argmin(np.abs(z2_nodes[idx]))]
            pick = np.unique(np.append(pick, ref))
        z1 = sign_t * (coords_t - c_t)
        order = np.argsort(z1)
        z1 = z1[order]
        rho, mom = [], []
        for k in pick:
            if along_x:
                u, gx, gy = f.values[k, :], ux[k, :], uy[k, :]
            else:
                u, gx, gy = f.values[:, k], ux[:, k], uy[:, k]
            u, gx, gy = u[order], gx[order], gy[order]
            d1 = gx * e1[0] + gy * e1[1]
            d2 = gx * e2[0] + gy * e2[1]
            dens = p.F(u) + 0.5 * d1 ** 2 - 0.5 * d2 ** 2
            rho.append(np.trapezoid(dens, z1))
            mom.append(np.trapezoid(z1 * dens, z1))
        z2 = z2_nodes[pick]
        order2 = np.argsort(z2)
        span = (float(z2_nodes[idx].min()), float(z2_nodes[idx].max()))
        return (z2[order2], np.array(rho)[order2], np.array(mom)[order2], span,
                float(max(abs(z1[0]), abs(z1[-1]))))

    # general direction: resample on rotated lines
    a, b = 0.5 * (x2 - x1), 0.5 * (y2 - y1)
    support = a * abs(e2[0]) + b * abs(e2[1])
    if window is None or isinstance(window, str):
        w = 0.5 * (support - margin)
        window = (-w, w)
    w = max(abs(window[0]), abs(window[1]))
    if half_length is None:
        cands = []
        if abs(e1[0]) > 1e-12:
            cands.append((a - w * abs(e2[0])) / abs(e1[0]))
        if abs(e1[1]) > 1e-12:
            cands.append((b - w * abs(e2[1])) / abs(e1[1]))
        half_length = min(cands)
    if half_length <= 0 or w < 0:
        raise GeometryError("rotated slices do not fit in the domain")
    step = min(f.hx, f.hy)
    m = int(math.ceil(2 * half_length / step)) + 1
    z1 = np.linspace(-half_length, half_length, m)
    if positions is None:
        z2 = np.unique(np.append(np.linspace(window[0], window[1], n_slices), 0.0))
    else:
        z2 = np.asarray(positions, dtype=float)
    rho, mom = [], []
    for zz in z2:
        xs = cx + z1 * e1[0] + zz * e2[0]
        ys = cy + z1 * e1[1] + zz * e2[1]
        try:
            u = f.interp(xs, ys)
        except GeometryError:
            raise GeometryError(f"slice at z2={zz:.3g} leaves the domain") from None
        gx = Field2D(ux, f.hx, f.hy, f.x0, f.y0).interp(xs, ys)
        gy = Field2D(uy, f.hx, f.hy, f.x0, f.y0).interp(xs, ys)
        d1 = gx * e1[0] + gy * e1[1]
        d2 = gx * e2[0] + gy * e2[1]
        dens = p.F(u) + 0.5 * d1 ** 2 - 0.5 * d2 ** 2
        rho.append(np.trapezoid(dens, z1))
        mom.append(np.trapezoid(z1 * dens, z1))
    return z2, np.array(rho), np.array(mom), tuple(window), float(half_length)


def hamiltonian_profile(f: Field2D, p: Potential, theta: float = 0.0, n_slices: int = 41,
                        margin: float | None = None, half_length: float | None = None,
                        window=None, center=None, positions=None) -> HamiltonianReport:
    """Slice integrals of F + u_{z1}^2/2 - u_{z2}^2/2 across lines at angle ``theta``.

    theta = 0 slices along x = const and integrates in y.  Slices sit in the
    interior window that stays ``margin`` (default 6 interface widths) clear
    of the truncation edges.  ``window="auto"`` (axis-aligned slices only)
    additionally drops slices whose zero crossings come within ``margin`` of
    the slice ends, e.g. where a tilted interface leaves the domain.
    """
    z2, rho, _, span, H = _slice_integrals(f, p, theta, n_slices, margin, half_length, window,
                                           center, positions)
    ref = float(rho[np.argmin(np.abs(z2))])
    return HamiltonianReport(theta=float(theta), positions=z2, rho=rho, reference=ref,
                             max_abs_deviation=float(np.max(np.abs(rho - ref))),
                             window=span, half_length=H)


def moment_profile(f: Field2D, p: Potential, n_slices: int = 41, theta: float = 0.0,
                   center=None, margin: float | None = None, window=None) -> MomentReport:
    """E = int z1 [F + u_{z1}^2/2 - u_{z2}^2/2] dz1 per slice.

    With theta = 0 this is int y [F + u_y^2/2 - u_x^2/2] dy with y measured
    from ``center`` (default: the domain center).
    """
    c = tuple(center) if center is not None else f.center
    z2, rho, mom, _, _ = _slice_integrals(f, p, theta, n_slices, margin, None, window, c)
    ref = float(mom[np.argmin(np.abs(z2))])
    return MomentReport(theta=float(theta), positions=z2, moment=mom, rho=rho, reference=ref,
                        max_abs_deviation=float(np.max(np.abs(mom - ref))),
                        max_abs=float(np.max(np.abs(mom))), center=c)


def canonical_center(f: Field2D, p: Potential, n_slices: int = 21, margin=None,
                     min_rho: float = 1e-3, window="auto"):
    """Translation that makes the first moments vanish in both axes.

    Shifting the origin by c along z1 changes the moment by -c * rho, so
    c = E / rho for each slicing direction.  A direction whose rho is
    (nearly) zero cannot pin the translation; it keeps the domain center.
    The default ``window="auto"`` skips slices whose interfaces run into
    the truncation edges (see :func:`hamiltonian_profile`).
    """
    cx, cy = f.center
    out = [cx, cy]
    for theta, k in ((0.0, 1), (math.pi / 2, 0)):
        rep = moment_profile(f, p, n_slices=n_slices, theta=theta, center=(cx, cy), margin=margin,
                             window=window)
        ok = np.abs(rep.rho) > min_rho * p.beta
        if np.any(ok):
            out[k] += float(np.mean(rep.moment[ok] / rep.rho[ok]))
    return tuple(out)


# ---------------------------------------------------------------------------
# pointwise gradient bound


def modica_check(f: Field2D, p: Potential, margin: float = 0.0) -> ModicaResult:
    """Positive part of |grad_h u|^2 - 2F(u) over interior nodes at least
    ``margin`` away from the domain edges.

    Nodes next to Dirichlet edges see the imposed data, which is an ansatz
    rather than a solution; a positive ``margin`` measures the bound on the
    solution proper.
    """
    u = f.values
    ux = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * f.hx)
    uy = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * f.hy)
    excess = ux ** 2 + uy ** 2 - 2.0 * p.F(u[1:-1, 1:-1])
    if margin > 0:
        x1, x2, y1, y2 = f.extent
        xs, ys = f.x[1:-1], f.y[1:-1]
        keep_x = (xs >= x1 + margin - 1e-9) & (xs <= x2 - margin + 1e-9)
        keep_y = (ys >= y1 + margin - 1e-9) & (ys <= y2 - margin + 1e-9)
        if not keep_x.any() or not keep_y.any():
            raise GeometryError("Modica window is empty; reduce the margin")
        excess = np.where(keep_y[:, None] & keep_x[None, :], excess, -np.inf)
    j, i = np.unravel_index(np.argmax(excess), excess.shape)
    top = float(excess[j, i])
    loc = (float(f.x[i + 1]), float(f.y[j + 1]))
    return ModicaResult(max_violation=max(top, 0.0), location=loc, max_excess=top)


# ---------------------------------------------------------------------------
# energy in disks


def _disk_rect_area(R, xa, xb, ya, yb):
    """Area of the disk |p| <= R intersected with [xa, xb] x [ya, yb] (vectorised)."""
    xa, xb, ya, yb = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (xa, xb, ya, yb)))
    lo = np.clip(xa, -R, R)
    hi = np.clip(xb, -R, R)
    r0 = np.sqrt(np.maximum(R * R - ya * ya, 0.0))
    r1 = np.sqrt(np.maximum(R * R - yb * yb, 0.0))
    bp = np.stack([lo, hi, -r0, r0, -r1, r1], axis=-1)
    bp = np.sort(np.clip(bp, lo[..., None], hi[..., None]), axis=-1)
    a, b = bp[..., :-1], bp[..., 1:]
    mid = 0.5 * (a + b)
    s_mid = np.sqrt(np.maximum(R * R - mid * mid, 0.0))

    def prim(X):
        X = np.clip(X, -R, R)
        return 0.5 * (X * np.sqrt(np.maximum(R * R - X * X, 0.0)) + R * R * np.arcsin(X / R))

    int_s = prim(b) - prim(a)
    width = b - a
    yb_, ya_ = yb[..., None], ya[..., None]
    top_is_s = s_mid < yb_
    bot_is_s = -s_mid > ya_
    top = np.where(top_is_s, int_s, yb_ * width)
    bot = np.where(bot_is_s, -int_s, ya_ * width)
    positive = np.minimum(yb_, s_mid) > np.maximum(ya_, -s_mid)
    return np.sum(np.where(positive, top - bot, 0.0), axis=-1)


def cell_energy_density(f: Field2D, p: Potential):
    """Per-cell 1/2 |grad u|^2 + F(u) with cell-centred differences."""
    u = f.values
    ux = 0.5 * ((u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])) / f.hx
    uy = 0.5 * ((u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])) / f.hy
    Fn = p.F(u)
    Fc = 0.25 * (Fn[:-1, :-1] + Fn[:-1, 1:] + Fn[1:, :-1] + Fn[1:, 1:])
    return 0.5 * (ux ** 2 + uy ** 2) + Fc


def disk_energy(f: Field2D, p: Potential, R: float, center=(0.0, 0.0), density=None) -> float:
    """E_R with cells cut by the circle weighted by their exact covered area."""
    cx, cy = center
    x1, x2, y1, y2 = f.extent
    if R <= 0:
        raise GeometryError("radius must be positive")
    if cx - R < x1 - 1e-9 or cx + R > x2 + 1e-9 or cy - R < y1 - 1e-9 or cy + R > y2 + 1e-9:
        raise GeometryError(f"disk of radius {R:.3g} around {center} leaves the domain")
    dens = cell_energy_density(f, p) if density is None else density
    xs, ys = f.x - cx, f.y - cy
    i0 = max(int(np.searchsorted(xs, -R)) - 1, 0)
    i1 = min(int(np.searchsorted(xs, R)) + 1, f.nx - 1)
    j0 = max(int(np.searchsorted(ys, -R)) - 1, 0)
    j1 = min(int(np.searchsorted(ys, R)) + 1, f.ny - 1)
    xa, xb = xs[i0:i1], xs[i0 + 1:i1 + 1]
    ya, yb = ys[j0:j1], ys[j0 + 1:j1 + 1]
    XA, YA = np.meshgrid(xa, ya)
    XB, YB = np.meshgrid(xb, yb)
    sub = dens[j0:j1, i0:i1]
    near = np.maximum(np.maximum(-XB, XA), 0) ** 2 + np.maximum(np.maximum(-YB, YA), 0) ** 2
    far = np.maximum(XA * XA, XB * XB) + np.maximum(YA * YA, YB * YB)
    full = far <= R * R
    cut = (~full) & (near < R * R)
    total = float(np.sum(sub[full])) * f.hx * f.hy
    if np.any(cut):
        total += float(np.sum(sub[cut] * _disk_rect_area(R, XA[cut], XB[cut], YA[cut], YB[cut])))
    return total


def energy_curve(f: Field2D, p: Potential, radii=None, center=(0.0, 0.0), n_tail: int = 5,
                 slope_tol: float = 0.05, count_tol: float = 0.3) -> EnergyCurve:
    """E_R and E_R/R on a list of radii, with an end-count estimate.

    The count round(tail mean of E_R/R / beta) is reported only when the
    tail slope of E_R/R is below ``slope_tol * beta`` per unit length and
    the ratio sits within ``count_tol`` of an integer.
    """
    if radii is None:
        x1, x2, y1, y2 = f.extent
        rmax = min(center[0] - x1, x2 - center[0], center[1] - y1, y2 - center[1])
        radii = np.linspace(rmax / 20, rmax, 20)
    radii = np.asarray(radii, dtype=float)
    dens = cell_energy_density(f, p)
    energies = np.array([disk_energy(f, p, R, center, dens) for R in radii])
    ratios = energies / radii
    beta = p.beta
    k = min(n_tail, radii.size)
    tail_mean = float(np.mean(ratios[-k:]))
    slope = float(np.polyfit(radii[-k:], ratios[-k:], 1)[0]) if k >= 2 else float("nan")
    est = tail_mean / beta
    count = None
    if k >= 2 and abs(slope) <= slope_tol * beta and abs(est - round(est)) <= count_tol:
        count = int(round(est))
    drops = ratios[:-1] - ratios[1:]
    mono = float(max(np.max(drops), 0.0)) if drops.size else 0.0
    return EnergyCurve(radii=radii, energies=energies, ratios=ratios, beta=beta,
                       center=tuple(center), tail_mean=tail_mean, tail_slope=slope,
                       end_count=count, monotonicity_defect=mono)


# ---------------------------------------------------------------------------
# exponential decay away from the level set


def _densify(polylines, step):
    pts = []
    for line in polylines:
        line = np.asarray(line, dtype=float)
        if len(line) == 1:
            pts.append(line)
            continue
        for a, b in zip(line[:-1], line[1:]):
            n = max(int(math.ceil(np.hypot(*(b - a)) / step)), 1)
            t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
            pts.append(a + t * (b - a))
        pts.append(line[-1:])
    return np.vstack(pts) if pts else np.empty((0, 2))


def distance_to_zero_set(f: Field2D, zero_set):
    """Distance from every node to the polylines of ``zero_set``."""
    pts = _densify(zero_set.polylines, 0.1 * min(f.hx, f.hy))
    if pts.size == 0:
        raise InsufficientDataError("zero set is empty")
    X, Y = f.mesh()
    d, _ = cKDTree(pts).query(np.column_stack([X.ravel(), Y.ravel()]))
    return d.reshape(X.shape)


def decay_fit(f: Field2D, zero_set, d_min: float = 2.0, d_max: float = 6.0, center=None,
              exclude_radius: float = 0.0, min_nodes: int = 100) -> DecayFit:
    """Least-squares fit of log(1 - |u|) = log C - nu d over nodes with d in [d_min, d_max]."""
    if not zero_set.polylines:
        raise InsufficientDataError("no level set to measure distances from")
    d = distance_to_zero_set(f, zero_set)
    gap = 1.0 - np.abs(f.values)
    use = (d >= d_min) & (d <= d_max) & (gap > 1e-14)
    if exclude_radius > 0:
        cx, cy = center if center is not None else f.center
        X, Y = f.mesh()
        use &= np.hypot(X - cx, Y - cy) >= exclude_radius
    n = int(use.sum())
    if n < min_nodes:
        raise InsufficientDataError(f"only {n} usable nodes for the decay fit (need {min_nodes})")
    fit = linregress(d[use], np.log(gap[use]))
    return DecayFit(nu=float(-fit.slope), C=float(math.exp(fit.intercept)),
                    r2=float(fit.rvalue ** 2), n_nodes=n, d_range=(d_min, d_max))
