import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cpesim import io
from cpesim import operators as ops
from cpesim.core import CFLError, Grid, PrimState, Regime, SingularSystemError, make_state
from cpesim.stepper import (
    MomentumOperator,
    PicardDivergenceError,
    Stepper,
    Viscosity,
    _integrate,
    assemble_forcing,
    collect,
    continuity_step_gravity,
    continuity_step_vacuum,
    gravity_transport_rhs,
    momentum_solve,
    run,
    solve_momentum_system,
    vacuum_transport_rhs,
)
from cpesim.verification import dense_oracle_momentum

from conftest import gravity_params, vacuum_params, wave_state

GRID = Grid(16, 16, 9)


def _zero_v(grid):
    return np.zeros((2,) + grid.shape3d)


# ------------------------------------------------------------ continuity


def test_zero_velocity_leaves_surface_unchanged():
    X, Y = GRID.mesh2d()
    xi = 1 + 0.2 * np.cos(2 * np.pi * X) * np.sin(4 * np.pi * Y)
    out = continuity_step_gravity(xi, _zero_v(GRID), gravity_params(), GRID, 1e-3)
    np.testing.assert_array_equal(out, xi)


def test_vacuum_stays_vacuum():
    v = io.random_fields(GRID, np.random.default_rng(3), 0.3)[1]
    out = continuity_step_vacuum(np.zeros(GRID.shape2d), v, vacuum_params(), GRID, 1e-3)
    np.testing.assert_array_equal(out, 0.0)


def test_constant_velocity_euler_substep():
    # one forward-Euler substep with v = U const, g = 0: xi - dt U . grad xi
    grid = Grid(32, 32, 5)
    X, Y = grid.mesh2d()
    U = (0.7, -0.3)
    xi = 1 + 0.1 * np.sin(2 * np.pi * X) * np.cos(4 * np.pi * Y)
    a = np.stack([np.full(grid.shape2d, U[0]), np.full(grid.shape2d, U[1])])
    dt = 1e-3
    step = xi + dt * gravity_transport_rhs(xi, a, 0.0, 0.0, grid.plan)
    dx = 0.1 * 2 * np.pi * np.cos(2 * np.pi * X) * np.cos(4 * np.pi * Y)
    dy = -0.1 * 4 * np.pi * np.sin(2 * np.pi * X) * np.sin(4 * np.pi * Y)
    np.testing.assert_allclose(step, xi - dt * (U[0] * dx + U[1] * dy), atol=1e-14)


def test_iota_damps_each_mode():
    grid = Grid(16, 16, 5)
    X, Y = grid.mesh2d()
    xi = 1 + 0.1 * np.cos(2 * np.pi * X) + 0.05 * np.sin(4 * np.pi * Y)
    dt, iota = 1e-2, 0.1
    out = continuity_step_gravity(xi, _zero_v(grid), gravity_params(iota=iota), grid, dt)
    f1 = 1 / (1 + iota * (2 * np.pi) ** 2 * dt)
    f2 = 1 / (1 + iota * (4 * np.pi) ** 2 * dt)
    expected = 1 + 0.1 * f1 * np.cos(2 * np.pi * X) + 0.05 * f2 * np.sin(4 * np.pi * Y)
    np.testing.assert_allclose(out, expected, atol=1e-14)


@pytest.mark.parametrize("scheme,order_const", [("ssp_rk2", 1 / 6), ("midpoint", 1 / 12)])
def test_vacuum_decay_coefficient(scheme, order_const):
    # a = 0, b = c: sigma_t = -c sigma / 2, exact factor exp(-c dt / 2)
    plan = GRID.plan
    a = np.zeros((2,) + GRID.shape2d)
    c = 3.0
    sigma = np.full(GRID.shape2d, 0.8)
    for dt in (1e-2, 5e-3):
        out = _integrate(sigma, lambda s: vacuum_transport_rhs(s, a, c, plan), dt, scheme)
        x = c * dt / 2
        err = np.max(np.abs(out / sigma - np.exp(-x)))
        assert err <= 1.01 * order_const * x**3 + 1e-15
        assert err >= 0.5 * order_const * x**3


def test_cfl_error_carries_suggestion():
    grid = Grid(16, 16, 5)
    v = np.ones((2,) + grid.shape3d) * 100.0
    with pytest.raises(CFLError) as exc:
        continuity_step_gravity(np.ones(grid.shape2d), v, gravity_params(), grid, 1e-2)
    assert exc.value.suggested_dt == pytest.approx(0.5 * grid.hx / 100.0)
    assert "CFL" in str(exc.value)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_vacuum_transport_preserves_sigma_squared(seed):
    # skew form: semi-discrete d/dt int sigma^2 vanishes when b = div a
    rng = np.random.default_rng(seed)
    grid = Grid(16, 16, 3)
    s, v = io.random_fields(grid, rng, 1.0)
    a = ops.dealias(v[..., 0], grid.plan)
    sigma = ops.dealias(s, grid.plan)
    rhs = vacuum_transport_rhs(sigma, a, ops.div_h(a, grid.plan), grid.plan)
    assert abs(np.mean(sigma * rhs)) < 1e-12 * max(1.0, np.mean(sigma**2))


# ------------------------------------------------------------ momentum


def test_zero_forcing_zero_velocity_stays_zero():
    rho = np.ones(GRID.shape3d)
    v = momentum_solve(rho, _zero_v(GRID), _zero_v(GRID), gravity_params(), GRID, 1e-3)
    np.testing.assert_array_equal(v, 0.0)


def test_crank_nicolson_amplification_horizontal_mode():
    grid = Grid(16, 16, 9)
    x, _, z = grid.mesh3d()
    v0 = np.stack([np.cos(2 * np.pi * x), np.zeros_like(z)])
    rho = np.ones(grid.shape3d)
    mu, lam, dt = 1.0, 0.0, 1e-3
    v1 = momentum_solve(rho, _zero_v(grid), v0, gravity_params(mu=mu, lam=lam), grid, dt)
    a = (2 * mu + lam) * (2 * np.pi) ** 2
    amp = (1 - a * dt / 2) / (1 + a * dt / 2)
    np.testing.assert_allclose(v1, amp * v0, atol=1e-12)


def test_vertical_mode_decay_second_order():
    mu, dt = 1.0, 1e-3
    errs = []
    for nz in (9, 17, 33):
        grid = Grid(4, 4, nz)
        _, _, z = grid.mesh3d()
        v0 = np.stack([np.zeros_like(z), np.cos(np.pi * z)])
        v1 = momentum_solve(np.ones(grid.shape3d), _zero_v(grid), v0, gravity_params(mu=mu, lam=0.0), grid, dt)
        a = mu * np.pi**2
        amp = (1 - a * dt / 2) / (1 + a * dt / 2)
        errs.append(np.max(np.abs(v1 - amp * v0)))
        oracle = dense_oracle_momentum(np.ones(grid.shape3d), _zero_v(grid), v0, Viscosity(mu, 0.0), grid, dt)
        np.testing.assert_allclose(v1, oracle, atol=1e-12)
    assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5


@pytest.mark.parametrize("coeffs", [Viscosity(1.0, 1.0), Viscosity(0.0, 0.0), Viscosity(0.5, -0.2)])
def test_fast_solve_matches_dense_oracle(coeffs):
    grid = Grid(4, 4, 9)
    rng = np.random.default_rng(11)
    s, v_n = io.random_fields(grid, rng, 0.5)
    _, forcing = io.random_fields(grid, rng, 1.0)
    rho = 1.0 + 0.3 * np.abs(s)[..., None] + 0.1 * grid.z_levels
    fast, _ = solve_momentum_system(rho, forcing, v_n, coeffs, grid, 1e-2)
    dense = dense_oracle_momentum(rho, forcing, v_n, coeffs, grid, 1e-2)
    assert np.max(np.abs(fast - dense)) < 1e-11 * max(1.0, np.max(np.abs(dense)))


def test_momentum_operator_symmetric_and_residual_small():
    grid = Grid(8, 8, 9)
    rng = np.random.default_rng(5)
    rho = 1.0 + 0.5 * rng.random(grid.shape3d)
    op = MomentumOperator(grid, Viscosity(1.0, 1.0), 1e-2, rho.mean(axis=(0, 1)))
    shape = (2, grid.nx, grid.ny, grid.nz - 2)
    x, y = rng.standard_normal(shape), rng.standard_normal(shape)
    xay, yax = np.sum(x * op.apply(y, rho)), np.sum(y * op.apply(x, rho))
    assert abs(xay - yax) <= 1e-12 * abs(xay)
    assert np.sum(x * op.apply(x, rho)) > 0
    b = op.apply(x, rho)
    sol, _ = op.solve(b, rho)
    assert np.linalg.norm(op.apply(sol, rho) - b) <= 1e-12 * np.linalg.norm(b)


def test_solution_satisfies_neumann_conditions():
    grid = Grid(8, 8, 9)
    rng = np.random.default_rng(2)
    _, v_n = io.random_fields(grid, rng, 0.5)
    _, forcing = io.random_fields(grid, rng, 1.0)
    v = momentum_solve(np.ones(grid.shape3d), forcing, v_n, gravity_params(), grid, 1e-2)
    vo = grid.vertical
    assert np.max(np.abs(vo.onesided_bottom(v))) < 1e-12
    assert np.max(np.abs(vo.onesided_top(v))) < 1e-12


def test_nonpositive_density_rejected():
    with pytest.raises(SingularSystemError):
        momentum_solve(np.zeros(GRID.shape3d), _zero_v(GRID), _zero_v(GRID), gravity_params(), GRID, 1e-3)


# ------------------------------------------------------------ forcing


def test_forcing_vanishes_at_rest():
    for params in (gravity_params(), vacuum_params()):
        f = assemble_forcing(np.ones(GRID.shape2d), _zero_v(GRID), params, GRID)
        np.testing.assert_array_equal(f, 0.0)


def test_forcing_vanishes_on_vacuum():
    v = io.random_fields(GRID, np.random.default_rng(4), 0.3)[1]
    f = assemble_forcing(np.zeros(GRID.shape2d), v, vacuum_params(), GRID)
    assert np.max(np.abs(f)) < 1e-14


def test_pressure_forcing_matches_symbolic():
    # xi = 1 + 0.1 cos 2 pi x, v = 0, g = 0: F = -2 xi grad xi
    xs = sp.symbols("x")
    xi_s = 1 + sp.Rational(1, 10) * sp.cos(2 * sp.pi * xs)
    fx = sp.lambdify(xs, -2 * xi_s * sp.diff(xi_s, xs), "numpy")
    X, _ = GRID.mesh2d()
    xi = 1 + 0.1 * np.cos(2 * np.pi * X)
    f = assemble_forcing(xi, _zero_v(GRID), gravity_params(g=0.0), GRID)
    np.testing.assert_allclose(f[0], (fx(X))[..., None] * np.ones(GRID.nz), atol=1e-13)
    np.testing.assert_allclose(f[1], 0.0, atol=1e-13)


def test_shear_advection_forcing():
    # rho = 1 (vacuum regime, sigma = 1), v = (sin 2 pi y, 0): advection vanishes, no pressure
    _, y, z = GRID.mesh3d()
    v = np.stack([np.sin(2 * np.pi * y) * np.ones_like(z), np.zeros_like(z)])
    f = assemble_forcing(np.ones(GRID.shape2d), v, vacuum_params(), GRID)
    assert np.max(np.abs(f)) < 1e-12


# ------------------------------------------------------------ Picard


def test_rest_state_converges_in_one_iteration():
    params = gravity_params()
    state = make_state(GRID, np.ones(GRID.shape2d), _zero_v(GRID), params)
    new, report = Stepper(params, GRID).advance(state)
    assert report.converged and report.iterations == 1
    np.testing.assert_array_equal(new.surface_var, 1.0)
    np.testing.assert_array_equal(new.v, 0.0)
    assert new.time == pytest.approx(1e-3)


def test_zero_iteration_budget_raises():
    params = gravity_params(picard_max_iter=0)
    state = wave_state(GRID, params)
    with pytest.raises(PicardDivergenceError) as exc:
        Stepper(params, GRID).advance(state)
    assert exc.value.report.iterations == 0


def test_tiny_budget_reports_residuals():
    params = gravity_params(picard_max_iter=1, picard_tol=1e-14)
    with pytest.raises(PicardDivergenceError) as exc:
        Stepper(params, GRID).advance(wave_state(GRID, params))
    assert len(exc.value.report.residuals) == 1 and not exc.value.report.converged


def test_standard_case_converges_quickly():
    params = gravity_params()
    state = wave_state(GRID, params)
    new, report = Stepper(params, GRID).advance(state)
    assert report.converged and report.iterations <= 5
    assert report.final_residual <= params.picard_tol
    est = report.contraction_estimates
    assert all(c < 1 for c in est)


def test_run_zero_steps_is_identity():
    params = gravity_params()
    state = wave_state(GRID, params)
    sink = []
    out = run(state, params, GRID, 0, sink.append)
    assert out is state and sink == []


def test_rest_run_records_constant():
    params = gravity_params()
    state = make_state(GRID, np.ones(GRID.shape2d), _zero_v(GRID), params)
    final, records = collect(state, params, GRID, 5)
    assert len(records) == 6
    assert len({r.mass for r in records}) == 1
    assert len({r.energy for r in records}) == 1
    assert final.time == pytest.approx(5e-3)


def test_step_preserves_neumann_and_mass():
    params = gravity_params()
    state = wave_state(GRID, params)
    final, records = collect(state, params, GRID, 3)
    vo = GRID.vertical
    assert np.max(np.abs(vo.onesided_bottom(final.v))) < 1e-12
    assert np.max(np.abs(vo.onesided_top(final.v))) < 1e-12
    m = [r.mass for r in records]
    assert max(abs(x - m[0]) for x in m) <= 1e-13 * m[0]


def test_stepper_rejects_free_boundary():
    with pytest.raises(ValueError):
        Stepper(gravity_params(regime=Regime.FREE_BOUNDARY, mu=0.0, lam=0.0), GRID)
