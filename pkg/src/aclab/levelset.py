"""Zero level set extraction and asymptotic end analysis."""
from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial import ConvexHull, QhullError

from .errors import ClusteringError, StructuralError, StructuralWarning
from .solver2d import Field2D

TWO_PI = 2.0 * math.pi


@dataclass
class ZeroSet:
    polylines: list
    closed: list
    grid: dict

    def points(self) -> np.ndarray:
        if not self.polylines:
            return np.empty((0, 2))
        return np.vstack(self.polylines)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["polyline", "closed", "x", "y"])
            for k, (line, closed) in enumerate(zip(self.polylines, self.closed)):
                for x, y in line:
                    w.writerow([k, int(closed), repr(float(x)), repr(float(y))])


@dataclass
class EndRay:
    """Asymptotic ray of the zero set.

    The supporting line is n . p = offset with n = (-sin theta, cos theta);
    ``intercept`` is the equivalent y-intercept A in y = tan(theta) x + A.
    """

    theta: float
    offset: float
    rms: float
    r_range: tuple
    n_points: int

    @property
    def direction(self):
        return np.array([math.cos(self.theta), math.sin(self.theta)])

    @property
    def intercept(self) -> float:
        c = math.cos(self.theta)
        return self.offset / c if abs(c) > 1e-12 else math.inf

    def distance(self, pts):
        pts = np.atleast_2d(pts)
        return -math.sin(self.theta) * pts[:, 0] + math.cos(self.theta) * pts[:, 1] - self.offset

    def to_dict(self):
        d = asdict(self)
        d["theta_deg"] = math.degrees(self.theta)
        d["intercept"] = self.intercept if math.isfinite(self.intercept) else None
        return d


# ---------------------------------------------------------------------------
# marching squares

# edges of a cell: 0 bottom (a-b), 1 right (b-c), 2 top (d-c), 3 left (a-d)
# corners: a=(j,i), b=(j,i+1), c=(j+1,i+1), d=(j+1,i)
_EDGE_CORNERS = {0: (0, 1), 1: (1, 2), 2: (3, 2), 3: (0, 3)}


def extract_zero_set(f: Field2D) -> ZeroSet:
    """Marching squares on the sign pattern u > 0, with linear interpolation
    along cell edges.  Four-crossing cells are split according to the sign
    of the cell-centre average."""
    u = f.values
    ny, nx = u.shape
    pos = u > 0
    grid = f.grid_meta()

    def vertex(edge_id):
        kind, j, i = edge_id
        if kind == "h":
            ua, ub = u[j, i], u[j, i + 1]
            t = ua / (ua - ub)
            return (f.x0 + (i + t) * f.hx, f.y0 + j * f.hy)
        ua, ub = u[j, i], u[j + 1, i]
        t = ua / (ua - ub)
        return (f.x0 + i * f.hx, f.y0 + (j + t) * f.hy)

    def edge_key(j, i, e):
        if e == 0:
            return ("h", j, i)
        if e == 2:
            return ("h", j + 1, i)
        if e == 3:
            return ("v", j, i)
        return ("v", j, i + 1)

    code = (pos[:-1, :-1].astype(int) + 2 * pos[:-1, 1:] + 4 * pos[1:, 1:] + 8 * pos[1:, :-1])
    js, is_ = np.nonzero((code != 0) & (code != 15))
    adj = defaultdict(list)
    for j, i in zip(js, is_):
        corners = (pos[j, i], pos[j, i + 1], pos[j + 1, i + 1], pos[j + 1, i])
        cut = [e for e in range(4) if corners[_EDGE_CORNERS[e][0]] != corners[_EDGE_CORNERS[e][1]]]
        if len(cut) == 2:
            pairs = [tuple(cut)]
        else:
            centre = 0.25 * (u[j, i] + u[j, i + 1] + u[j + 1, i + 1] + u[j + 1, i])
            if (centre > 0) == corners[0]:
                pairs = [(0, 1), (2, 3)]  # isolate corners b and d
            else:
                pairs = [(0, 3), (1, 2)]  # isolate corners a and c
        for e1, e2 in pairs:
            k1, k2 = edge_key(j, i, e1), edge_key(j, i, e2)
            adj[k1].append(k2)
            adj[k2].append(k1)

    polylines, closed = [], []
    seen = set()

    def walk(start):
        chain = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [k for k in adj[cur] if k != prev and k not in seen]
            if not nxt:
                back = [k for k in adj[cur] if k != prev]
                return chain, bool(back) and back[0] == start and len(chain) > 2
            prev, cur = cur, nxt[0]
            chain.append(cur)
            seen.add(cur)

    starts = sorted(k for k, v in adj.items() if len(v) == 1)
    for s in starts + sorted(adj):
        if s in seen:
            continue
        chain, is_closed = walk(s)
        pts = np.array([vertex(k) for k in chain])
        if is_closed:
            pts = np.vstack([pts, pts[:1]])
        polylines.append(pts)
        closed.append(is_closed)
    return ZeroSet(polylines, closed, grid)


def interface_residual(f: Field2D, zs: ZeroSet) -> float:
    """max |u| at zero-set vertices under bilinear interpolation."""
    pts = zs.points()
    if pts.size == 0:
        return 0.0
    i = (pts[:, 0] - f.x0) / f.hx
    j = (pts[:, 1] - f.y0) / f.hy
    return float(np.max(np.abs(map_coordinates(f.values, [j, i], order=1, mode="nearest"))))


# ---------------------------------------------------------------------------
# ray fitting


def zero_set_center(zs: ZeroSet):
    pts = zs.points()
    if len(pts) == 0:
        return (0.0, 0.0)
    try:
        hull = ConvexHull(pts)
        poly = pts[hull.vertices]
        x, y = poly[:, 0], poly[:, 1]
        xs, ys = np.roll(x, -1), np.roll(y, -1)
        cross = x * ys - xs * y
        area = 0.5 * cross.sum()
        if abs(area) < 1e-12:
            raise QhullError
        return (float(((x + xs) * cross).sum() / (6 * area)),
                float(((y + ys) * cross).sum() / (6 * area)))
    except (QhullError, ValueError):
        return tuple(float(v) for v in pts.mean(axis=0))


def fit_line_tls(pts):
    """Orthogonal-regression line: (centroid, unit direction, rms distance)."""
    c = pts.mean(axis=0)
    _, sv, vt = np.linalg.svd(pts - c, full_matrices=False)
    rms = sv[-1] / math.sqrt(len(pts)) if len(sv) > 1 else 0.0
    return c, vt[0], float(rms)


def fit_ends(zs: ZeroSet, r_min: float | None = None, r_max: float | None = None, center=None,
             width: float = 1.0 / math.sqrt(2.0), gap: float = 0.05,
             min_points: int = 5) -> list[EndRay]:
    """Fit one ray per angular cluster of zero-set points in the annulus
    r_min < |p - center| < r_max.

    Defaults: center is the centroid of the zero set's convex hull, r_min
    is 8 interface widths and r_max 95% of the farthest zero-set point.
    """
    pts = zs.points()
    if len(pts) == 0:
        return []
    c = np.asarray(center if center is not None else zero_set_center(zs), dtype=float)
    rel = pts - c
    r = np.hypot(rel[:, 0], rel[:, 1])
    if r_min is None:
        r_min = 8.0 * width
    if r_max is None:
        r_max = 0.95 * float(r.max())
    if not r_min < r_max:
        raise ClusteringError(f"empty annulus: r_min={r_min:.3g} >= r_max={r_max:.3g}")
    sel = (r > r_min) & (r < r_max)
    pts, rel, r = pts[sel], rel[sel], r[sel]
    if len(pts) == 0:
        return []
    phi = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), TWO_PI)
    order = np.argsort(phi)
    phi, pts, r = phi[order], pts[order], r[order]
    gaps = np.diff(np.append(phi, phi[0] + TWO_PI))
    breaks = np.flatnonzero(gaps > gap)
    if breaks.size == 0:
        raise ClusteringError("zero-set points surround the center; ends are not separated")
    # rotate so that a cluster starts right after the largest break
    first = (breaks[-1] + 1) % len(phi)
    idx = np.roll(np.arange(len(phi)), -first)
    bounds = np.sort((breaks - first) % len(phi) + 1)
    clusters = np.split(idx, bounds[bounds < len(phi)])

    rays = []
    for cl in clusters:
        if len(cl) < min_points:
            continue
        ph = phi[cl]
        spread = np.mod(ph[-1] - ph[0], TWO_PI)
        if spread > math.pi / 2:
            raise ClusteringError(f"a cluster spans {math.degrees(spread):.1f} degrees; "
                                  "ends are not separated (enlarge r_min)")
        cp = pts[cl]
        centroid, v, rms = fit_line_tls(cp)
        if np.dot(v, centroid - c) < 0:
            v = -v
        theta = math.atan2(v[1], v[0]) % TWO_PI
        offset = -math.sin(theta) * centroid[0] + math.cos(theta) * centroid[1]
        rays.append(EndRay(theta=theta, offset=float(offset), rms=rms,
                           r_range=(float(r[cl].min()), float(r[cl].max())), n_points=len(cl)))
    return sorted(rays, key=lambda e: e.theta)


def ray_faithfulness(zs: ZeroSet, ray: EndRay, center, band: float = 0.5) -> float:
    """Distance from the fitted line to the level-set points near the outer support radius."""
    pts = zs.points()
    rel = pts - np.asarray(center, dtype=float)
    r = np.hypot(rel[:, 0], rel[:, 1])
    phi = np.arctan2(rel[:, 1], rel[:, 0])
    dphi = np.abs(np.angle(np.exp(1j * (phi - ray.theta))))
    near = (np.abs(r - ray.r_range[1]) <= band) & (dphi < math.pi / 4)
    if not np.any(near):
        return math.inf
    return float(np.min(np.abs(ray.distance(pts[near]))))


# ---------------------------------------------------------------------------
# balance and angle relations


def balance_defect(ends) -> float:
    """|sum of end directions|."""
    if len(ends) < 2:
        raise StructuralError("balance needs at least two ends")
    if len(ends) % 2:
        warnings.warn(f"odd number of ends ({len(ends)}); entire solutions have 2k ends",
                      StructuralWarning, stacklevel=2)
    nu = np.sum([[math.cos(_angle(e)), math.sin(_angle(e))] for e in ends], axis=0)
    return float(np.hypot(*nu))


def sine_sum_defect(ends, n_grid: int = 32) -> float:
    """max over a theta grid of |sum_i sin(theta_i + theta)|."""
    th = np.array([_angle(e) for e in ends])
    grid = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    return float(np.max(np.abs(np.sin(th[None, :] + grid[:, None]).sum(axis=1))))


def _angle(e) -> float:
    return float(e.theta if isinstance(e, EndRay) else e)


def _wrap(a):
    """Map to (-pi, pi]."""
    return math.atan2(math.sin(a), math.cos(a))


@dataclass
class AngleRelations:
    n_ends: int
    rotation: float
    angles: list
    contact_angle: float | None = None
    defect_12: float | None = None
    defect_13: float | None = None
    antipodality: float | None = None

    def to_dict(self):
        return asdict(self)


def angle_relations(ends) -> AngleRelations:
    """Four ends: rotate the bisector of the pair around the positive x-axis
    onto it, then report |t1 - (pi - t2)|, |t1 - (t3 - pi)| and the contact
    angle 2 t1.  Two ends: report |t2 - t1 - pi|."""
    th = sorted(_angle(e) % TWO_PI for e in ends)
    n = len(th)
    if n == 2:
        anti = abs(_wrap(th[1] - th[0] - math.pi))
        return AngleRelations(2, 0.0, th, antipodality=anti)
    if n != 4:
        raise StructuralError(f"angle relations need 2 or 4 ends, got {n}")
    best = None
    for k in range(4):
        a, b = th[k], th[(k + 1) % 4]
        width = (b - a) % TWO_PI
        bis = _wrap(a + 0.5 * width)
        if best is None or abs(bis) < abs(best):
            best = bis
    rot = -best
    rt = sorted((t + rot) % TWO_PI for t in th)
    t1, t2, t3, t4 = rt
    return AngleRelations(4, rot, rt, contact_angle=2 * t1,
                          defect_12=abs(t1 - (math.pi - t2)), defect_13=abs(t1 - (t3 - math.pi)))


# ---------------------------------------------------------------------------
# half-plane branches


@dataclass
class BranchFit:
    kappa: float
    intercept: float
    rms: float
    slope_upper: float
    slope_lower: float
    n_points: int

    @property
    def slope_antisymmetry_deg(self) -> float:
        return abs(math.degrees(math.atan(self.slope_upper) + math.atan(self.slope_lower)))

    def to_dict(self):
        d = asdict(self)
        d["slope_antisymmetry_deg"] = self.slope_antisymmetry_deg
        return d


def halfplane_branches(zs: ZeroSet, x_min: float, x_max: float, y_axis: float = 0.0) -> BranchFit:
    """Fit |y - y_axis| = kappa x + C jointly to both branches over x in [x_min, x_max];
    the separate branch slopes give the antisymmetry check."""
    pts = zs.points()
    sel = (pts[:, 0] >= x_min) & (pts[:, 0] <= x_max)
    pts = pts[sel]
    up = pts[pts[:, 1] > y_axis]
    lo = pts[pts[:, 1] < y_axis]
    if len(up) < 3 or len(lo) < 3:
        raise StructuralError("half-plane zero set lacks two branches in the fit window")
    xs = pts[:, 0]
    ys = np.abs(pts[:, 1] - y_axis)
    kappa, c = np.polyfit(xs, ys, 1)
    rms = float(np.sqrt(np.mean((ys - kappa * xs - c) ** 2)))
    su = np.polyfit(up[:, 0], up[:, 1], 1)[0]
    sl = np.polyfit(lo[:, 0], lo[:, 1], 1)[0]
    return BranchFit(float(kappa), float(c), rms, float(su), float(sl), len(pts))


# ---------------------------------------------------------------------------
# symmetry


@dataclass
class SymmetryReport:
    center: tuple
    y_defect: float
    x_defect: float
    ux_min: float
    uy_max: float

    @property
    def monotone_x_defect(self) -> float:
        return max(0.0, -self.ux_min)

    @property
    def monotone_y_defect(self) -> float:
        return max(0.0, self.uy_max)

    def to_dict(self):
        d = asdict(self)
        d.update(monotone_x_defect=self.monotone_x_defect, monotone_y_defect=self.monotone_y_defect)
        return d


def _reflect_defect(f: Field2D, axis: int, c: float) -> float:
    u = f.values
    if axis == 0:
        coords, h, o = f.y, f.hy, f.y0
    else:
        coords, h, o = f.x, f.hx, f.x0
    lo, hi = coords[0], coords[-1]
    mirror = 2 * c - coords
    keep = (mirror >= lo - 1e-9 * h) & (mirror <= hi + 1e-9 * h)
    if not np.any(keep):
        return math.nan
    pos = (mirror[keep] - o) / h
    on_grid = np.allclose(pos, np.round(pos), atol=1e-9)
    if axis == 0:
        a = u[keep, :]
        if on_grid:
            b = u[np.round(pos).astype(int), :]
        else:
            J, I = np.meshgrid(pos, np.arange(f.nx), indexing="ij")
            b = map_coordinates(u, [J, I], order=1, mode="nearest")
    else:
        a = u[:, keep]
        if on_grid:
            b = u[:, np.round(pos).astype(int)]
        else:
            J, I = np.meshgrid(np.arange(f.ny), pos, indexing="ij")
            b = map_coordinates(u, [J, I], order=1, mode="nearest")
    return float(np.max(np.abs(a - b)))


def symmetry_report(f: Field2D, center=None, delta: float | None = None) -> SymmetryReport:
    """Reflection defects about x = cx and y = cy, and the sign of the
    discrete derivatives: min u_x on {x > cx + delta}, max u_y on
    {x > cx + delta, y > cy + delta} (delta defaults to 2h)."""
    cx, cy = center if center is not None else f.center
    delta = 2 * max(f.hx, f.hy) if delta is None else delta
    u = f.values
    ux = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * f.hx)
    uy = (u[2:, 1:-1] - u[:-2, 1:-1]) / (2 * f.hy)
    X, Y = np.meshgrid(f.x[1:-1], f.y[1:-1])
    right = X > cx + delta
    quad = right & (Y > cy + delta)
    ux_min = float(ux[right].min()) if np.any(right) else math.nan
    uy_max = float(uy[quad].max()) if np.any(quad) else math.nan
    return SymmetryReport(center=(float(cx), float(cy)), y_defect=_reflect_defect(f, 0, cy),
                          x_defect=_reflect_defect(f, 1, cx), ux_min=ux_min, uy_max=uy_max)


# ---------------------------------------------------------------------------
# four-end solves with pinned far-field angle


@dataclass
class PinnedSolve:
    field: object
    spec: object
    intercept: float
    fitted_theta: float
    history: list

    def to_dict(self):
        return {"intercept": self.intercept, "fitted_theta": self.fitted_theta,
                "fitted_theta_deg": math.degrees(self.fitted_theta),
                "spec": self.spec.to_dict(), "history": self.history}


def _fitted_half_angle(f, width, r_min=None, r_max=None) -> float:
    ends = fit_ends(extract_zero_set(f), r_min=r_min, r_max=r_max, width=width)
    if len(ends) != 4:
        raise StructuralError(f"expected 4 ends, found {len(ends)}")
    return 0.5 * angle_relations(ends).contact_angle


def solve_contact_angle(theta: float, grid, p, prof, cfg=None,
                        angle_tol: float = math.radians(0.1), stage_tol: float = math.radians(1.0),
                        max_rounds: int = 10, step: float = math.radians(15.0),
                        r_min=None, r_max=None, noise: float = 0.0, seed: int = 0,
                        log=None) -> PinnedSolve:
    """Symmetric four-end solution whose fitted ends make half contact angle ``theta``.

    Boundary rays through the origin do not match the asymptotic lines
    y = +-(tan(theta) x + C) of a four-end solution unless C = 0 (the right
    angle case); with a wrong C the interior level set is straight but tilted
    towards the pinned boundary points.  The intercept C is therefore found
    by secant iteration on (fitted half angle - theta), and the contact angle
    is reached by continuation from the right-angle saddle, warm-starting
    every solve from the previous field.  Intermediate stages stop at
    ``stage_tol``; the final one at ``angle_tol``.  ``noise`` perturbs the
    first initial iterate only.
    """
    from .solver2d import FourEnd, HalfPlane, add_noise, build_boundary, relax, with_boundary

    if not 0 < theta < math.pi / 2:
        raise StructuralError("half contact angle must lie in (0, pi/2)")
    quarter = math.pi / 4
    n = max(1, int(math.ceil(abs(theta - quarter) / step)))
    stages = [quarter + (theta - quarter) * k / n for k in range(n + 1)] if theta != quarter \
        else [quarter]

    def spec_for(t, C):
        return FourEnd(t, HalfPlane.branches(t, C).offsets)

    field, C, history = None, 0.0, []
    fitted, used = quarter, 0.0
    solved = [(quarter, 0.0)]  # (theta, intercept) of finished stages
    slope = None  # d(fitted - theta)/dC from the latest secant pair
    for t in stages:
        if len(solved) >= 2 or (solved and t != solved[-1][0]):
            (t0, c0), (t1, c1) = (solved[-2], solved[-1]) if len(solved) >= 2 else (solved[-1],) * 2
            C = c1 + (c1 - c0) * (t - t1) / (t1 - t0) if t1 != t0 else c1
        Cs, errs = [], []
        for _ in range(max_rounds):
            spec = spec_for(t, C)
            if field is None:
                init = build_boundary(spec, grid, prof)
                if noise:
                    init = add_noise(init, noise, seed)
            else:
                init = with_boundary(field, spec, prof)
            field = relax(init, p, cfg)
            used = C
            fitted = _fitted_half_angle(field, p.width, r_min, r_max)
            err = fitted - t
            history.append({"theta": t, "intercept": C, "fitted": fitted,
                            "newton_steps": field.meta.get("newton_steps")})
            if log:
                log(f"theta={math.degrees(t):.2f} C={C:.4f} fitted={math.degrees(fitted):.3f}")
            Cs.append(C)
            errs.append(err)
            if abs(err) <= (angle_tol if t == stages[-1] else stage_tol):
                break
            if len(Cs) >= 2 and errs[-1] != errs[-2]:
                slope = (errs[-1] - errs[-2]) / (Cs[-1] - Cs[-2])
            if slope:
                C = C - err / slope
            else:
                C = C + math.copysign(0.5, -err)
        else:
            if t == stages[-1]:
                raise StructuralError(f"contact angle not pinned after {max_rounds} rounds "
                                      f"(fitted {math.degrees(fitted):.3f} deg)")
        solved.append((t, used))
    return PinnedSolve(field=field, spec=spec, intercept=used, fitted_theta=fitted, history=history)
