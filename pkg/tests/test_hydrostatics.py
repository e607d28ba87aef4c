import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpesim import io
from cpesim.core import Grid, NegativeDensityError, PrimState, l2_norm
from cpesim.hydrostatics import (
    derived_fields,
    recover_mass_flux,
    recover_w_gravity,
    recover_w_vacuum,
    weighted_embedding_check,
)

from conftest import gravity_params, vacuum_params

GRID = Grid(32, 32, 9)


def _random_state(seed, modes=3, positive_shift=1.0):
    rng = np.random.default_rng(seed)
    s, v = io.random_fields(GRID, rng, amplitude=0.3, modes=modes)
    return PrimState(positive_shift + s, v, 0.0)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_gravity_flux_vanishes_at_both_ends(seed):
    state = _random_state(seed)
    flux = recover_mass_flux(state, gravity_params(), GRID)
    bound = 1e-10 * l2_norm(state.v, GRID)
    assert np.abs(flux[..., 0]).max() <= bound
    assert np.abs(flux[..., -1]).max() <= bound


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_vacuum_flux_vanishes_at_both_ends(seed):
    state = _random_state(seed)
    sflux, _ = recover_w_vacuum(state, vacuum_params(), GRID)
    bound = 1e-10 * l2_norm(state.v, GRID)
    assert np.abs(sflux[..., 0]).max() <= bound
    assert np.abs(sflux[..., -1]).max() <= bound


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_gravity_without_g_matches_vacuum(seed):
    # bandwidth 2 keeps sigma^2 v~ below the grid Nyquist, so both paths are exact
    rng = np.random.default_rng(seed)
    s, v = io.random_fields(GRID, rng, amplitude=0.3, modes=2)
    sigma = 1 + s
    vac = recover_mass_flux(PrimState(sigma, v, 0.0), vacuum_params(), GRID)
    grav = recover_mass_flux(PrimState(sigma**2, v, 0.0), gravity_params(g=0.0), GRID)
    assert np.abs(vac - grav).max() <= 1e-12 * max(1.0, np.abs(grav).max())


def test_flux_matches_closed_form():
    # xi = 1, g = 0, v = (sin 2 pi x cos pi z, 0):  rho w = -2 cos(2 pi x) sin(pi z)
    grid = Grid(16, 16, 129)
    x, _, z = grid.mesh3d()
    v = np.stack([np.sin(2 * np.pi * x) * np.cos(np.pi * z), np.zeros_like(z)])
    state = PrimState(np.ones(grid.shape2d), v, 0.0)
    flux, w = recover_w_gravity(state, gravity_params(g=0.0), grid)
    exact = -2 * np.cos(2 * np.pi * x) * np.sin(np.pi * z)
    err = np.abs(flux - exact).max()
    assert err < 2e-4
    np.testing.assert_array_equal(w, flux)  # rho = 1


def test_flux_error_second_order_in_z():
    errs = []
    for nz in (17, 33, 65):
        grid = Grid(8, 8, nz)
        x, _, z = grid.mesh3d()
        v = np.stack([np.sin(2 * np.pi * x) * np.cos(np.pi * z), np.zeros_like(z)])
        flux = recover_mass_flux(PrimState(np.ones(grid.shape2d), v, 0.0), gravity_params(g=0.0), grid)
        errs.append(np.abs(flux + 2 * np.cos(2 * np.pi * x) * np.sin(np.pi * z)).max())
    assert np.log2(errs[0] / errs[1]) > 1.9 and np.log2(errs[1] / errs[2]) > 1.9


def test_w_undefined_in_vacuum():
    X, _ = GRID.mesh2d()
    sigma = np.maximum(0.0, np.cos(2 * np.pi * X)) ** 2
    v = np.zeros(GRID.vshape)
    v[0] = 0.1
    sflux, w = recover_w_vacuum(PrimState(sigma, v, 0.0), vacuum_params(), GRID)
    vacuum = sigma == 0
    assert np.all(np.isnan(w[vacuum]))
    assert np.all(np.isfinite(w[~vacuum]))


def test_gravity_floor_violation_raises():
    state = PrimState(np.full((32, 32), 0.2), np.zeros(GRID.vshape), 0.0)
    with pytest.raises(NegativeDensityError):
        recover_w_gravity(state, gravity_params(g=0.0, rho_floor=0.5), GRID)


def test_derived_fields():
    state = _random_state(3)
    p = gravity_params()
    d = derived_fields(state, p, GRID)
    np.testing.assert_allclose(d.pressure, d.rho**2)
    np.testing.assert_allclose(d.rho - d.rho[..., :1], 4.9 * GRID.z_levels * np.ones_like(d.rho), atol=1e-13)
    np.testing.assert_allclose(d.w * d.rho, d.mass_flux_w, atol=1e-13)


class TestWeightedEmbedding:
    def test_zero_field(self):
        rho = np.ones(GRID.shape3d)
        assert weighted_embedding_check(np.zeros(GRID.shape3d), rho, GRID) == 0.0

    def test_zero_mass_rejected(self):
        with pytest.raises(ValueError):
            weighted_embedding_check(np.ones(GRID.shape3d), np.zeros(GRID.shape3d), GRID)

    def test_exponent_range(self):
        with pytest.raises(ValueError):
            weighted_embedding_check(np.ones(GRID.shape3d), np.ones(GRID.shape3d), GRID, p=7)

    @given(st.integers(0, 1000), st.floats(2, 6))
    @settings(max_examples=15, deadline=None)
    def test_ratio_bounded_with_vacuum(self, seed, p):
        rng = np.random.default_rng(seed)
        X, _ = GRID.mesh2d()
        rho = (np.maximum(0.0, np.cos(2 * np.pi * X)) ** 4)[..., None] * np.ones(GRID.nz)
        f = io.random_fields(GRID, rng, 1.0)[1][0]
        ratio = weighted_embedding_check(f, rho, GRID, p=p)
        assert 0 < ratio < 10

    def test_constant_field_ratio(self):
        rho = np.ones(GRID.shape3d)
        assert weighted_embedding_check(np.full(GRID.shape3d, 2.0), rho, GRID) == pytest.approx(1.0)


def test_vacuum_flux_point_value():
    # sigma = 1, v = (cos 2 pi x cos pi z, 0):  sigma w = 2 sin(2 pi x) sin(pi z); sqrt(2) at x = 1/8, z = 1/2
    values = []
    for nz in (17, 33):
        grid = Grid(16, 16, nz)
        x, _, z = grid.mesh3d()
        v = np.stack([np.cos(2 * np.pi * x) * np.cos(np.pi * z), np.zeros_like(z)])
        sflux, w = recover_w_vacuum(PrimState(np.ones(grid.shape2d), v, 0.0), vacuum_params(), grid)
        values.append(sflux[2, 0, (nz - 1) // 2])
    err = [abs(val - np.sqrt(2)) for val in values]
    assert err[1] < 2e-3 and err[0] / err[1] > 3.5


def test_sigma_zero_gives_zero_flux():
    v = io.random_fields(GRID, np.random.default_rng(1), 0.3)[1]
    sflux, w = recover_w_vacuum(PrimState(np.zeros(GRID.shape2d), v, 0.0), vacuum_params(), GRID)
    assert np.all(sflux == 0.0)
    assert np.all(np.isnan(w))


def test_z_independent_velocity_gives_zero_vacuum_flux():
    X, Y = GRID.mesh2d()
    v = np.stack([np.sin(2 * np.pi * Y), np.cos(2 * np.pi * X)])[..., None] * np.ones(GRID.nz)
    sigma = 1 + 0.2 * np.cos(2 * np.pi * (X + Y))
    sflux, _ = recover_w_vacuum(PrimState(sigma, v, 0.0), vacuum_params(), GRID)
    assert np.abs(sflux).max() < 1e-13
