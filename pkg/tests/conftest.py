import numpy as np
import pytest

from cpesim.core import Grid, Regime, SimParams, make_state

CRITERIA = []


def record_criterion(number, name, ok, detail=""):
    """Remember an acceptance outcome for the terminal summary."""
    CRITERIA.append((number, name, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(CRITERIA):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {name}  {detail}")


def gravity_params(**kw):
    base = dict(regime=Regime.GRAVITY_GAMMA2, mu=1.0, lam=1.0, g=9.8, dt=1e-3)
    base.update(kw)
    return SimParams(**base)


def vacuum_params(**kw):
    base = dict(regime=Regime.VACUUM_NO_GRAVITY, mu=1.0, lam=0.0, g=0.0, dt=1e-3)
    base.update(kw)
    return SimParams(**base)


def wave_state(grid, params, amp=0.1):
    X, _ = grid.mesh2d()
    _, y, z = grid.mesh3d()
    xi = 1 + amp * np.cos(2 * np.pi * X)
    v = np.stack([amp * np.sin(2 * np.pi * y) * np.cos(np.pi * z), np.zeros_like(z)])
    return make_state(grid, xi, v, params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_grid():
    return Grid(16, 16, 9)
