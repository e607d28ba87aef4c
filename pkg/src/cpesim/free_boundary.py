"""Inviscid free-boundary problem in the vertical coordinate eta = 1 - z/Z.

``eta = 0`` is the vacuum interface and ``eta = 1`` the ground.  The
density profile is ``rho = ((gamma-1)/gamma g eta Z)^(1/(gamma-1))``, so
every vertical average carries the weight ``eta^a`` with ``a = 1/(gamma-1)``.
Discrete weighted averages and cumulative integrals are normalized so that
the weight integrates to ``(gamma-1)/gamma`` exactly; with that choice the
recovered W vanishes at the ground and for eta-independent velocity to
roundoff.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from cpesim import operators as ops
from cpesim.core import CFLError, Grid, NumericalError, ParameterError, Regime, SimParams
from cpesim.stepper import CFL_LIMIT


@dataclasses.dataclass
class FbState:
    Z: np.ndarray  # (nx, ny) interface height
    v: np.ndarray  # (2, nx, ny, nz) on eta levels
    time: float = 0.0

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        _check_positive(self.Z)

    def copy(self) -> "FbState":
        return FbState(self.Z.copy(), self.v.copy(), self.time)


def _check_positive(Z) -> None:
    Z = np.asarray(Z)
    if not np.all(np.isfinite(Z)) or np.any(Z <= 0):
        raise NumericalError(f"interface height must be positive (min {np.min(Z):.6g})")


def _check_params(params: SimParams) -> None:
    if params.regime is not Regime.FREE_BOUNDARY:
        raise ParameterError("free-boundary operations need the free_boundary regime")
    if not params.g > 0:
        raise ParameterError("free-boundary problem needs g > 0")


def exponent(params: SimParams) -> float:
    return 1.0 / (params.gamma - 1.0)


def fb_density(Z, eta, params: SimParams):
    """rho = ((gamma-1)/gamma g eta Z)^(1/(gamma-1)); broadcasts Z against eta."""
    _check_params(params)
    _check_positive(Z)
    gam = params.gamma
    base = (gam - 1) / gam * params.g * np.asarray(eta) * np.asarray(Z)
    return base ** exponent(params)


def fb_ground_pressure(Z, params: SimParams):
    _check_params(params)
    _check_positive(Z)
    gam = params.gamma
    return ((gam - 1) / gam * params.g * np.asarray(Z)) ** (gam / (gam - 1))


def column_mass(Z, params: SimParams, grid: Grid | None = None) -> float:
    """Horizontal mean of Z^(gamma/(gamma-1)), proportional to the total mass."""
    b = params.gamma / (params.gamma - 1)
    return float(np.mean(np.asarray(Z) ** b))


class _Weights:
    """Normalized eta^a quadrature on the eta levels of a grid."""

    def __init__(self, grid: Grid, params: SimParams):
        gam = params.gamma
        eta = grid.z_levels
        self.eta = eta
        self.wa = eta ** exponent(params)
        self.scale = (gam - 1) / gam / float(self.wa @ grid.quad_weights)
        self.q = grid.quad_weights
        # discrete eta^(gamma/(gamma-1)) = gamma/(gamma-1) * int_0^eta zeta^a
        self.prefactor = gam / (gam - 1) * self.scale * ops.vint(self.wa)

    def avg(self, f):
        return self.scale * ((f * self.wa) @ self.q)

    def cumint(self, f):
        return self.scale * ops.vint(f * self.wa)


def fb_recover_W(Z, v, params: SimParams, grid: Grid) -> np.ndarray:
    """Diagnose W from the integrated continuity equation; W = 0 at eta = 0 and 1."""
    _check_params(params)
    _check_positive(Z)
    gam = params.gamma
    plan = grid.plan
    w = _Weights(grid, params)
    gz = ops.grad_h(Z, plan)
    div_v = ops.div_h(v, plan)
    A = w.avg(v)
    B = w.avg(div_v)
    C = w.cumint(v)
    D = w.cumint(div_v)
    bracket = gam * (A[0] * gz[0] + A[1] * gz[1]) + (gam - 1) * B * Z
    rhs = (
        w.prefactor * bracket[..., None]
        - gam * (C[0] * gz[0][..., None] + C[1] * gz[1][..., None])
        - (gam - 1) * Z[..., None] * D
    )
    denom = (gam - 1) * w.wa * Z[..., None]
    W = np.zeros_like(rhs)
    np.divide(rhs, denom, out=W, where=w.wa > 0)
    W[..., 0] = 0.0  # limit at the vacuum interface
    return W


def fb_interface_rhs(Z, v, params: SimParams, grid: Grid) -> np.ndarray:
    """dZ/dt from (gamma-1) Z_t + gamma avg(eta^a v).grad Z + (gamma-1) avg(eta^a div v) Z = 0."""
    _check_params(params)
    _check_positive(Z)
    gam = params.gamma
    plan = grid.plan
    w = _Weights(grid, params)
    gz = ops.grad_h(Z, plan)
    A = w.avg(v)
    B = w.avg(ops.div_h(v, plan))
    return -(gam * (A[0] * gz[0] + A[1] * gz[1]) + (gam - 1) * B * Z) / (gam - 1)


def _column_rhs(Y, v, params, grid, w):
    """d/dt Z^b = -b div(Z^b avg(eta^a v)), b = gamma/(gamma-1)."""
    b = params.gamma / (params.gamma - 1)
    A = w.avg(v)
    return -b * ops.div_h(ops.dealias(Y * A, grid.plan), grid.plan)


def _momentum_rhs(Z, v, params, grid):
    plan = grid.plan
    W = fb_recover_W(Z, v, params, grid)
    gv = ops.grad_h_vec(v, plan)
    adv = v[0] * gv[:, 0] + v[1] * gv[:, 1] + W * ops.d_z(v, mode="onesided")
    grav = params.g * ops.grad_h(Z, plan)[..., None]
    return -ops.dealias(adv, plan) - grav


def fb_advance(state: FbState, params: SimParams, grid: Grid, dt: float | None = None) -> FbState:
    """One SSP-RK2 step of the interface and momentum equations.

    The interface is advanced through ``Z^(gamma/(gamma-1))`` in divergence
    form, which is equivalent to the interface law for smooth Z and keeps
    the column mass constant to roundoff.
    """
    _check_params(params)
    dt = params.dt if dt is None else dt
    h = min(grid.hx, grid.hy)
    vmax = float(np.max(np.abs(state.v)))
    if vmax * dt / h > CFL_LIMIT:
        raise CFLError(f"CFL violated: |v|max*dt/h = {vmax * dt / h:.3g}", CFL_LIMIT * h / vmax)
    b = params.gamma / (params.gamma - 1)
    w = _Weights(grid, params)

    def stage(Y, v):
        if np.any(Y <= 0) or not np.all(np.isfinite(Y)):
            raise NumericalError("interface collapse: Z <= 0")
        Z = Y ** (1.0 / b)
        return _column_rhs(Y, v, params, grid, w), _momentum_rhs(Z, v, params, grid)

    Y0 = state.Z**b
    dY, dv = stage(Y0, state.v)
    Y1, v1 = Y0 + dt * dY, state.v + dt * dv
    dY, dv = stage(Y1, v1)
    Y2 = 0.5 * Y0 + 0.5 * (Y1 + dt * dY)
    v2 = 0.5 * state.v + 0.5 * (v1 + dt * dv)
    if np.any(Y2 <= 0) or not np.all(np.isfinite(Y2)):
        raise NumericalError("interface collapse: Z <= 0")
    return FbState(Y2 ** (1.0 / b), v2, state.time + dt)


def fb_run(state: FbState, params: SimParams, grid: Grid, n_steps: int, sink=None) -> FbState:
    for _ in range(n_steps):
        state = fb_advance(state, params, grid)
        if sink is not None:
            sink(state)
    return state


# ------------------------------------------------------------ coordinates


def _interp_uniform(f: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Linear interpolation along the last axis at fractional indices ``pos``."""
    n = f.shape[-1]
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    t = pos - i0
    f0 = np.take_along_axis(f, i0, axis=-1)
    f1 = np.take_along_axis(f, i0 + 1, axis=-1)
    return (1 - t) * f0 + t * f1


def sigma_transform(f_phys: np.ndarray, Z: np.ndarray, z_top: float, n_eta: int) -> np.ndarray:
    """Resample ``f(x, y, z)`` on uniform levels of ``[0, z_top]`` to ``n_eta`` eta levels.

    Uses z = Z (1 - eta); requires ``z_top >= max Z``.
    """
    _check_positive(Z)
    if z_top < np.max(Z):
        raise ValueError("physical column must reach the interface (z_top >= max Z)")
    nzp = f_phys.shape[-1]
    eta = np.linspace(0.0, 1.0, n_eta)
    z = Z[..., None] * (1.0 - eta)
    return _interp_uniform(f_phys, z / z_top * (nzp - 1))


def inverse_sigma_transform(
    f_eta: np.ndarray, Z: np.ndarray, z_top: float, n_phys: int, fill: float = np.nan
) -> np.ndarray:
    """Resample eta-level data to uniform physical levels; ``fill`` above the interface."""
    _check_positive(Z)
    neta = f_eta.shape[-1]
    z = np.linspace(0.0, z_top, n_phys)
    eta = 1.0 - z / Z[..., None]
    out = _interp_uniform(f_eta, eta * (neta - 1))
    return np.where(eta >= -1e-14, out, fill)
