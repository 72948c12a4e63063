from __future__ import annotations

import math

import numpy as np
import pytest

from aclab import Field2D, FourEnd, Planar, Potential, solve, solve_profile

SQRT2 = math.sqrt(2.0)

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def tanh_layer(s):
    return np.tanh(np.asarray(s) / SQRT2)


@pytest.fixture(scope="session")
def quartic():
    return Potential.quartic()


@pytest.fixture(scope="session")
def profile(quartic):
    return solve_profile(quartic, L=12.0, h=0.01)


@pytest.fixture(scope="session")
def saddle(quartic, profile):
    """Right-angle four-end saddle on [-10, 10]^2, h = 0.05 (401 x 401)."""
    grid = Field2D.box((-10.0, 10.0), (-10.0, 10.0), h=0.05)
    return solve(FourEnd(math.pi / 4, (0.0, 0.0, 0.0, 0.0)), grid, quartic, profile)


@pytest.fixture(scope="session")
def planar_fields(quartic, profile):
    """Solved tilted planar layers on [-12, 12]^2, h = 0.05, keyed by angle."""
    cache = {}

    def get(phi):
        if phi not in cache:
            grid = Field2D.box((-12.0, 12.0), (-12.0, 12.0), h=0.05)
            cache[phi] = solve(Planar(phi, 0.0), grid, quartic, profile)
        return cache[phi]

    return get
