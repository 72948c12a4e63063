from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab.errors import ConfigurationError, GeometryError, SolverTimeout
from aclab.solver2d import (Field2D, FourEnd, HalfPlane, MultiEnd, Planar, SolveConfig, add_noise,
                            boundary_from_dict, build_boundary, read_snapshot, relax, residual,
                            solve, with_boundary, write_snapshot)

from conftest import tanh_layer


def g4(s):
    """Fourth derivative of tanh(k s), k = 1/sqrt(2): 8 k^4 T (2 - 3T^2)(1 - T^2)."""
    T = tanh_layer(s)
    return 8 * 0.25 * T * (2 - 3 * T ** 2) * (1 - T ** 2)


# ---------------------------------------------------------------------------
# residual


def test_residual_of_wells_and_unstable_state(quartic):
    for c in (1.0, -1.0, 0.0):
        f = Field2D.box((-2, 2), (-2, 2), h=0.1, fill=c)
        assert residual(f, quartic) <= 1e-12


def test_residual_of_exact_layer_is_truncation_error(quartic):
    h = 0.05
    f = Field2D.from_function(lambda x, y: tanh_layer(y), (-8, 8), (-8, 8), h=h)
    s = np.linspace(-8, 8, 16001)
    oracle = h ** 2 / 12 * np.max(np.abs(g4(s)))
    r = residual(f, quartic)
    assert 0.9 * oracle <= r <= 1.1 * oracle
    assert r < 5e-3


# ---------------------------------------------------------------------------
# boundary data


def test_planar_boundary_values(profile):
    L = 10.0
    grid = Field2D.box((-L, L), (-L, L), h=0.1)
    f = build_boundary(Planar(math.pi / 2, 0.0), grid, profile)
    # bottom edge y = -L lies deep in the +1 phase
    assert np.all(np.abs(f.values[0, :] - float(profile(L))) < 1e-12)
    assert np.all(f.values[-1, :] < -0.999)


def test_fourend_sign_pattern(profile):
    L = 10.0
    grid = Field2D.box((-L, L), (-L, L), h=0.1)
    f = build_boundary(FourEnd(math.pi / 4), grid, profile)
    # (L, 0) and (0, L) sit L sin(45 deg) = 7.07 from both rays: g(7.07)^2 = 0.9998
    assert f.values[f.ny // 2, -1] == pytest.approx(1.0, abs=1e-3)
    assert f.values[-1, f.nx // 2] == pytest.approx(-1.0, abs=1e-3)
    assert f.values[f.ny // 2, 0] == pytest.approx(1.0, abs=1e-3)
    assert f.values[0, f.nx // 2] == pytest.approx(-1.0, abs=1e-3)


def test_fourend_corner_is_on_the_ray(profile):
    # the corner (L, L) sits exactly on the 45 degree ray; slightly off it the
    # value is -1 towards the north sector
    f = Field2D.box((-10, 10), (-10, 10), h=0.1)
    v = FourEnd(math.pi / 4).ansatz(profile, np.array([5.0]), np.array([10.0]))
    assert float(v[0]) < -0.98
    assert float(build_boundary(FourEnd(math.pi / 4), f, profile).values[-1, -1]) == pytest.approx(0.0, abs=1e-9)


def test_margin_rule_names_the_edge(profile):
    grid = Field2D.box((-10, 3), (-10, 10), h=0.1)
    with pytest.raises(ConfigurationError, match="x_max"):
        build_boundary(FourEnd(math.pi / 4), grid, profile)
    grid = Field2D.box((-10, 10), (-10, 10), h=0.1)
    with pytest.raises(ConfigurationError, match="offset"):
        build_boundary(Planar(0.3, 6.0), grid, profile)


def test_halfplane_domain_must_start_at_zero(profile):
    with pytest.raises(ConfigurationError):
        build_boundary(HalfPlane.branches(math.pi / 4), Field2D.box((-1, 10), (-10, 10), h=0.1),
                       profile)


@pytest.mark.parametrize("angles", [
    (0.5, 2.0, 4.0),                              # odd
    (0.0, 0.2, 3.3, 3.4),                          # unbalanced
    (0.3, 0.2, 3.3, 3.4),                          # not increasing
    (0.0, math.pi + 0.1),                          # sector of width > pi
])
def test_multiend_validation(angles):
    with pytest.raises(ConfigurationError):
        MultiEnd(angles)


def test_boundary_from_dict_roundtrip():
    for spec in (Planar(0.4, 0.5), FourEnd(0.7, (0.1, -0.1, 0.1, -0.1)),
                 MultiEnd((0.5, 2.0, 0.5 + math.pi, 2.0 + math.pi)), HalfPlane.branches(0.6, 0.3)):
        assert boundary_from_dict(spec.to_dict()) == spec
    assert boundary_from_dict({"kind": "planar", "theta_deg": 90.0}).theta == pytest.approx(math.pi / 2)
    with pytest.raises(ConfigurationError):
        boundary_from_dict({"kind": "hexagon"})


@given(theta=st.floats(0.15, 1.42), x=st.floats(-30, 30), y=st.floats(-30, 30))
@settings(max_examples=200, deadline=None)
def test_ansatz_bounded_and_signed(profile, theta, x, y):
    spec = FourEnd(theta)
    v = float(spec.ansatz(profile, np.array([x]), np.array([y]))[0])
    assert -1.0 <= v <= 1.0
    # deep inside the east sector the ansatz is +1, inside the north sector -1
    r = 200.0
    east = float(spec.ansatz(profile, np.array([r]), np.array([0.0]))[0])
    north = float(spec.ansatz(profile, np.array([0.0]), np.array([r]))[0])
    assert east > 0.99 and north < -0.99


@given(theta=st.floats(0.2, 1.37), t=st.floats(2.0, 20.0), eps=st.floats(1e-9, 1e-6))
@settings(max_examples=100, deadline=None)
def test_ansatz_continuous_across_sector_edges(profile, theta, t, eps):
    spec = FourEnd(theta)
    for a in spec.end_angles():
        p1 = t * np.array([math.cos(a - eps), math.sin(a - eps)])
        p2 = t * np.array([math.cos(a + eps), math.sin(a + eps)])
        v1 = spec.ansatz(profile, p1[:1], p1[1:])
        v2 = spec.ansatz(profile, p2[:1], p2[1:])
        assert abs(float(v1[0]) - float(v2[0])) < 1e-4


# ---------------------------------------------------------------------------
# relax


@pytest.fixture(scope="module")
def horizontal(quartic, profile):
    grid = Field2D.box((-20, 20), (-20, 20), h=0.1)
    return solve(Planar(math.pi / 2, 0.0), grid, quartic, profile)


def test_planar_solve_is_the_layer(horizontal, quartic):
    X, Y = horizontal.mesh()
    assert np.max(np.abs(horizontal.values - tanh_layer(-Y))) <= 1e-3
    assert horizontal.residual_max <= 1e-10
    assert residual(horizontal, quartic) <= 1e-10


def test_fields_are_immutable_after_solve(horizontal):
    with pytest.raises(ValueError):
        horizontal.values[3, 3] = 0.0


def test_solved_field_is_a_fixed_point(horizontal, quartic):
    again = relax(horizontal, quartic)
    assert again.meta["newton_steps"] == 0 and again.meta["flow_steps"] == 0
    np.testing.assert_array_equal(again.values, horizontal.values)


def test_grid_refinement_is_second_order(quartic, profile):
    errs = []
    for h in (0.2, 0.1):
        grid = Field2D.box((-8, 8), (-8, 8), h=h)
        f = solve(Planar(math.pi / 3, 0.0), grid, quartic, profile)
        X, Y = f.mesh()
        exact = tanh_layer(X * math.cos(math.pi / 3) - Y * math.sin(math.pi / 3))
        errs.append(np.max(np.abs(f.values - exact)))
    assert 3.0 <= errs[0] / errs[1] <= 5.0


@pytest.fixture(scope="module")
def small_saddle(quartic, profile):
    grid = Field2D.box((-6, 6), (-6, 6), h=0.1)
    return solve(FourEnd(math.pi / 4), grid, quartic, profile)


def test_saddle_diagonal_antisymmetry(small_saddle):
    u = small_saddle.values
    assert np.max(np.abs(u + u.T)) <= 1e-6


def test_symmetry_preservation(small_saddle):
    u = small_saddle.values
    assert np.max(np.abs(u - u[::-1, :])) <= 1e-6
    assert np.max(np.abs(u - u[:, ::-1])) <= 1e-6


def test_saddle_monotone_in_x(small_saddle):
    f = small_saddle
    u = f.values
    ux = (u[1:-1, 2:] - u[1:-1, :-2]) / (2 * f.hx)
    X, Y = np.meshgrid(f.x[1:-1], f.y[1:-1])
    band = 6 * 0.7071
    sel = (X >= f.hx - 1e-9) & (Y > 0) & (X < 6 - band) & (Y < 6 - band)
    assert np.min(ux[sel]) > 0


def test_values_stay_in_range(small_saddle):
    assert np.max(np.abs(small_saddle.values)) <= 1 + 1e-6


def test_dirichlet_edges_untouched(small_saddle, profile):
    data = build_boundary(FourEnd(math.pi / 4), small_saddle, profile)
    for a, b in ((small_saddle.values[0], data.values[0]), (small_saddle.values[:, -1], data.values[:, -1])):
        np.testing.assert_array_equal(a, b)


def test_timeout_carries_best_field(quartic, profile):
    grid = Field2D.box((-6, 6), (-6, 6), h=0.1)
    with pytest.raises(SolverTimeout) as exc:
        solve(FourEnd(math.pi / 4), grid, quartic, profile,
              SolveConfig(max_iter=1, flow_steps=0))
    best = exc.value.field
    assert best is not None and best.residual_max == min(exc.value.history)


def test_noise_is_seeded_and_spares_edges(profile):
    grid = Field2D.box((-6, 6), (-6, 6), h=0.1)
    f = build_boundary(FourEnd(math.pi / 4), grid, profile)
    a, b = add_noise(f, 0.2, 3), add_noise(f, 0.2, 3)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.values[0], f.values[0])
    assert not np.array_equal(a.values, add_noise(f, 0.2, 4).values)


def test_noisy_start_converges(quartic, profile):
    grid = Field2D.box((-6, 6), (-6, 6), h=0.1)
    init = add_noise(build_boundary(FourEnd(math.pi / 4), grid, profile), 0.2, 11)
    f = relax(init, quartic)
    assert f.residual_max <= 1e-10
    assert np.max(np.abs(f.values + f.values.T)) <= 1e-6


def test_halfplane_neumann_edge(quartic, profile):
    grid = Field2D.box((0, 10), (-10, 10), h=0.1)
    f = solve(HalfPlane.branches(math.pi / 4, 0.0), grid, quartic, profile)
    assert f.residual_max <= 1e-10
    # mirror ghost: the one-sided difference at x = 0 vanishes to O(h^2)
    ux0 = (-3 * f.values[:, 0] + 4 * f.values[:, 1] - f.values[:, 2]) / (2 * f.hx)
    assert np.max(np.abs(ux0[5:-5])) < 0.05
    assert f.values[f.ny // 2, -2] > 0.999


def test_with_boundary_keeps_interior(small_saddle, profile):
    spec = FourEnd.translated(math.pi / 4, 0.0, 0.5)
    g = with_boundary(small_saddle, spec, profile)
    np.testing.assert_array_equal(g.values[1:-1, 1:-1], small_saddle.values[1:-1, 1:-1])
    np.testing.assert_array_equal(g.values[0], build_boundary(spec, small_saddle, profile).values[0])


# ---------------------------------------------------------------------------
# grid + snapshots


def test_interp_and_geometry_errors():
    f = Field2D.from_function(lambda x, y: 2 * x + 3 * y, (-1, 1), (-1, 1), h=0.1)
    assert float(f.interp(np.array([0.123]), np.array([-0.456]))[0]) == pytest.approx(2 * 0.123 - 3 * 0.456)
    with pytest.raises(GeometryError):
        f.interp(np.array([1.5]), np.array([0.0]))


def test_snapshot_roundtrip(small_saddle, tmp_path):
    path = write_snapshot(small_saddle, tmp_path / "s.ac2", extra={"note": "x"})
    head = path.read_bytes().split(b"\n", 1)[0].decode().split()
    assert head[0] == "AC2" and int(head[1]) == small_saddle.nx and head[7] == "quartic"
    assert len(path.read_bytes()) == len(b" ".join(map(str.encode, head))) + 1 + 8 * small_saddle.values.size
    back = read_snapshot(path)
    np.testing.assert_array_equal(back.values, small_saddle.values)
    assert (back.hx, back.hy, back.x0, back.y0) == (small_saddle.hx, small_saddle.hy,
                                                   small_saddle.x0, small_saddle.y0)
    side = json.loads((tmp_path / "s.ac2.json").read_text())
    assert side["bc"]["kind"] == "fourend" and side["note"] == "x"
    assert back.bc == small_saddle.bc


def test_solves_are_bitwise_deterministic(quartic, profile, tmp_path):
    grid = Field2D.box((-6, 6), (-6, 6), h=0.15)
    a = solve(FourEnd(math.pi / 4), grid, quartic, profile, noise=0.1, seed=5)
    b = solve(FourEnd(math.pi / 4), grid, quartic, profile, noise=0.1, seed=5)
    pa = write_snapshot(a, tmp_path / "a.ac2")
    pb = write_snapshot(b, tmp_path / "b.ac2")
    assert pa.read_bytes() == pb.read_bytes()
