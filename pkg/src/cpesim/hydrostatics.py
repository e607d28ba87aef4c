"""Density reconstruction and vertical-velocity recovery.

In both regimes the vertical momentum equation is replaced by hydrostatic
balance, so w has no evolution equation.  It is diagnosed from the
vertically integrated continuity equation as a mass flux (rho w or
sigma w) that vanishes at both ends of the column; w itself is only
defined where the density exceeds the floor.
"""

from __future__ import annotations

import math

import numpy as np

from cpesim import operators as ops
from cpesim.core import (
    DerivedFields,
    Grid,
    NegativeDensityError,
    PrimState,
    Regime,
    SimParams,
    integrate,
)


def density_from_surface(surface: np.ndarray, params: SimParams, grid: Grid) -> np.ndarray:
    """3D density from xi (rho = xi + g z / 2) or sigma (rho = sigma**2)."""
    if params.regime is Regime.GRAVITY_GAMMA2:
        return surface[..., None] + 0.5 * params.g * grid.z_levels
    if params.regime is Regime.VACUUM_NO_GRAVITY:
        return np.broadcast_to((surface**2)[..., None], surface.shape + (grid.nz,)).copy()
    raise ValueError(f"no surface-variable density for regime {params.regime}")


def reconstruct_density(state: PrimState, params: SimParams, grid: Grid) -> np.ndarray:
    rho = density_from_surface(state.surface_var, params, grid)
    if params.regime is Regime.GRAVITY_GAMMA2:
        low = rho.min()
        if low < 0:
            raise NegativeDensityError(f"negative density {low:.6g} in gravity regime")
    return rho


def mass_flux_gravity(xi: np.ndarray, v: np.ndarray, g: float, grid: Grid) -> np.ndarray:
    """rho w = -int_0^z [ div_h(xi v~) + (g/2) (z div_h v)~ ] dz'."""
    plan = grid.plan
    z = grid.z_levels
    vt = ops.vfluct(v)
    integrand = ops.div_h(xi[..., None] * vt, plan)
    if g != 0.0:
        integrand = integrand + 0.5 * g * ops.vfluct(z * ops.div_h(v, plan))
    flux = -ops.vint(integrand)
    flux[..., 0] = 0.0
    return flux


def sigma_flux_vacuum(sigma: np.ndarray, v: np.ndarray, grid: Grid) -> np.ndarray:
    """sigma w = -int_0^z [ sigma (div_h v)~ + 2 v~ . grad_h sigma ] dz'."""
    plan = grid.plan
    divt = ops.vfluct(ops.div_h(v, plan))
    gs = ops.grad_h(sigma, plan)
    vt = ops.vfluct(v)
    integrand = sigma[..., None] * divt + 2 * (vt[0] * gs[0][..., None] + vt[1] * gs[1][..., None])
    flux = -ops.vint(integrand)
    flux[..., 0] = 0.0
    return flux


def _divide_where(num: np.ndarray, den: np.ndarray, threshold: float) -> np.ndarray:
    ok = den > threshold
    out = np.full(num.shape, np.nan)
    np.divide(num, den, out=out, where=ok)
    return out


def recover_w_gravity(state: PrimState, params: SimParams, grid: Grid):
    """Return ``(rho_w, w)``; w is NaN where rho <= rho_floor."""
    if params.regime is not Regime.GRAVITY_GAMMA2:
        raise ValueError("recover_w_gravity requires the gravity regime")
    rho = reconstruct_density(state, params, grid)
    flux = mass_flux_gravity(state.surface_var, state.v, params.g, grid)
    if params.rho_floor > 0 and rho.min() <= params.rho_floor:
        raise NegativeDensityError(
            f"density {rho.min():.6g} at or below floor {params.rho_floor:.6g}; cannot divide"
        )
    return flux, _divide_where(flux, rho, params.rho_floor)


def recover_w_vacuum(state: PrimState, params: SimParams, grid: Grid):
    """Return ``(sigma_w, w)``; w is NaN where sigma <= rho_floor**0.5."""
    sigma = state.surface_var
    sflux = sigma_flux_vacuum(sigma, state.v, grid)
    sig3 = np.broadcast_to(sigma[..., None], sflux.shape)
    return sflux, _divide_where(sflux, sig3, math.sqrt(params.rho_floor))


def recover_mass_flux(state: PrimState, params: SimParams, grid: Grid) -> np.ndarray:
    """rho w in either regime."""
    if params.regime is Regime.GRAVITY_GAMMA2:
        return mass_flux_gravity(state.surface_var, state.v, params.g, grid)
    sigma = state.surface_var
    return sigma[..., None] * sigma_flux_vacuum(sigma, state.v, grid)


def derived_fields(state: PrimState, params: SimParams, grid: Grid) -> DerivedFields:
    rho = reconstruct_density(state, params, grid)
    if params.regime is Regime.GRAVITY_GAMMA2:
        flux = mass_flux_gravity(state.surface_var, state.v, params.g, grid)
        w = _divide_where(flux, rho, params.rho_floor)
    else:
        flux, w = recover_w_vacuum(state, params, grid)
    return DerivedFields(rho=rho, pressure=rho**params.gamma, mass_flux_w=flux, w=w)


def weighted_embedding_check(f: np.ndarray, rho: np.ndarray, grid: Grid, p: float = 2.0) -> float:
    """Ratio ``||f||_p / (||grad f||_2 + ||rho^(1/2) f||_2)`` on the grid.

    Requires positive finite mass and pressure integral.  The gradient is
    spectral in x, y and uses midpoint differences in z.
    """
    if not 2 <= p <= 6:
        raise ValueError("p must lie in [2, 6]")
    mass = integrate(rho, grid)
    if not (mass > 0 and np.isfinite(mass)):
        raise ValueError("weighted embedding needs positive finite mass")
    f = np.asarray(f, dtype=np.float64)
    lp = integrate(np.abs(f) ** p, grid) ** (1.0 / p)
    if lp == 0.0:
        return 0.0
    gh = ops.grad_h(f, grid.plan)
    grad_sq = integrate(gh[0] ** 2 + gh[1] ** 2, grid)
    grad_sq += float(np.mean(grid.vertical.stiffness_energy(f)))
    denom = math.sqrt(grad_sq) + math.sqrt(integrate(rho * f**2, grid))
    if denom == 0.0:
        raise ZeroDivisionError("zero denominator in weighted embedding ratio")
    return lp / denom
