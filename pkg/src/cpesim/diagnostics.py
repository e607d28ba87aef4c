"""Conservation diagnostics and continuous-dependence experiments."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np

from cpesim import operators as ops
from cpesim.core import (
    DiagnosticsRecord,
    Grid,
    PrimState,
    SimParams,
    integrate,
    l2_norm,
)
from cpesim.hydrostatics import density_from_surface


def mass(state: PrimState, params: SimParams, grid: Grid) -> float:
    return integrate(density_from_surface(state.surface_var, params, grid), grid)


def min_density(state: PrimState, params: SimParams, grid: Grid) -> float:
    return float(np.min(density_from_surface(state.surface_var, params, grid)))


def dissipation_rate(v: np.ndarray, params: SimParams, grid: Grid) -> float:
    """mu ||grad v||^2 + (mu + lam) ||div_h v||^2 in the discrete inner product of the solver.

    The horizontal Laplacian keeps the Nyquist mode and the divergence
    drops it, exactly as in the momentum operator, so the value is the
    quadratic form the viscous step dissipates.
    """
    plan = grid.plan
    q = grid.quad_weights
    vq = v * q
    form = -params.mu * ops.laplace_h(vq, plan)
    if params.mu + params.lam != 0:
        form -= (params.mu + params.lam) * ops.grad_h(ops.div_h(vq, plan), plan)
    horiz = float(np.mean(np.sum(v * form, axis=(0, -1))))
    vert = params.mu * float(np.mean(np.sum(grid.vertical.stiffness_energy(v), axis=0)))
    return horiz + vert


def energy(state: PrimState, params: SimParams, grid: Grid) -> tuple[float, float]:
    """Return ``(kinetic + internal energy, dissipation rate)``.

    Internal energy is ``1/(gamma-1) int rho^gamma``.  With gravity the
    potential-energy term is a fixed multiple of the mass and is left out.
    """
    rho = density_from_surface(state.surface_var, params, grid)
    v = state.v
    kinetic = 0.5 * integrate(rho * np.sum(v**2, axis=0), grid)
    internal = integrate(rho**params.gamma, grid) / (params.gamma - 1)
    return kinetic + internal, dissipation_rate(v, params, grid)


def record(state: PrimState, params: SimParams, grid: Grid, picard_iters: int = 0) -> DiagnosticsRecord:
    e, d = energy(state, params, grid)
    return DiagnosticsRecord(
        time=state.time,
        mass=mass(state, params, grid),
        energy=e,
        dissipation_rate=d,
        min_density=min_density(state, params, grid),
        surface_l2=l2_norm(state.surface_var, grid),
        v_l2=l2_norm(state.v, grid),
        picard_iters=picard_iters,
    )


def energy_balance_residual(records: Sequence[DiagnosticsRecord]) -> np.ndarray:
    """|E(t) + int_0^t D ds - E(0)| at every record after the first (trapezoid in time)."""
    if len(records) < 2:
        return np.zeros(0)
    t = np.array([r.time for r in records])
    e = np.array([r.energy for r in records])
    d = np.array([r.dissipation_rate for r in records])
    dissipated = np.cumsum(0.5 * (d[1:] + d[:-1]) * np.diff(t))
    return np.abs(e[1:] + dissipated - e[0])


def relative_mass_drift(records: Sequence[DiagnosticsRecord]) -> float:
    m = np.array([r.mass for r in records])
    return float(np.max(np.abs(m - m[0])) / abs(m[0])) if m[0] != 0 else float(np.max(np.abs(m)))


def sobolev_proxies(state: PrimState, grid: Grid) -> dict:
    """Discrete H1/H2 seminorm-inclusive norms of the surface variable and velocity.

    Horizontal derivatives are spectral; vertical ones use second differences.
    """
    plan = grid.plan

    def h_norms(f):
        l2 = l2_norm(f, grid) ** 2
        if f.ndim == 2:
            g = ops.grad_h(f, plan)
            h1 = np.mean(np.sum(g**2, axis=0))
            hess = ops.grad_h_vec(g, plan)
            h2 = np.mean(np.sum(hess**2, axis=(0, 1)))
            return math.sqrt(l2 + h1), math.sqrt(l2 + h1 + h2)
        g = ops.grad_h(f, plan)
        dz = ops.d_z(f, mode="onesided")
        h1 = integrate(np.sum(g**2, axis=0) + dz**2, grid)
        hess = ops.grad_h_vec(g, plan)
        gz = ops.d_z(g, mode="onesided")
        dzz = ops.d_zz(f, mode="onesided")
        h2 = integrate(np.sum(hess**2, axis=(0, 1)) + 2 * np.sum(gz**2, axis=0) + dzz**2, grid)
        return math.sqrt(l2 + h1), math.sqrt(l2 + h1 + h2)

    s1, s2 = h_norms(state.surface_var)
    v1 = v2 = 0.0
    for c in range(state.v.shape[0]):
        a, b = h_norms(state.v[c])
        v1 += a * a
        v2 += b * b
    return {"surface_h1": s1, "surface_h2": s2, "v_h1": math.sqrt(v1), "v_h2": math.sqrt(v2)}


@dataclasses.dataclass
class StabilitySeries:
    time: np.ndarray
    surface: np.ndarray  # ||s_a - s_b||
    weighted_v_a: np.ndarray  # ||rho_a^(1/2) (v_a - v_b)||
    weighted_v_b: np.ndarray  # ||rho_b^(1/2) (v_a - v_b)||
    grad_v: np.ndarray  # (int_0^t ||grad(v_a - v_b)||^2 ds)^(1/2)
    growth_rate: float

    @property
    def total(self) -> np.ndarray:
        """Combined distance sup-in-time terms plus the time-integrated gradient."""
        return self.surface + self.weighted_v_a + self.grad_v


def _distance(sa, sb, params, grid):
    rho_a = density_from_surface(sa.surface_var, params, grid)
    rho_b = density_from_surface(sb.surface_var, params, grid)
    dv = sa.v - sb.v
    ds = l2_norm(sa.surface_var - sb.surface_var, grid)
    wa = math.sqrt(max(integrate(rho_a * np.sum(dv**2, axis=0), grid), 0.0))
    wb = math.sqrt(max(integrate(rho_b * np.sum(dv**2, axis=0), grid), 0.0))
    gq = grad_sq(dv, grid)
    return ds, wa, wb, gq


def grad_sq(v: np.ndarray, grid: Grid) -> float:
    from cpesim.stepper import grad_sq_integral

    return grad_sq_integral(v, grid)


def stability_experiment(
    state_a: PrimState, state_b: PrimState, params: SimParams, grid: Grid, n_steps: int
) -> StabilitySeries:
    """Evolve two states side by side and record the continuous-dependence norms."""
    from cpesim.stepper import Stepper

    stepper = Stepper(params, grid)
    sa, sb = state_a, state_b
    times, surf, wa_s, wb_s, grad = [], [], [], [], []
    integral = 0.0
    prev_gq = None
    for n in range(n_steps + 1):
        if n > 0:
            sa, _ = stepper.advance(sa)
            sb, _ = stepper.advance(sb)
        ds, wa, wb, gq = _distance(sa, sb, params, grid)
        if prev_gq is not None:
            integral += 0.5 * (gq + prev_gq) * params.dt
        prev_gq = gq
        times.append(sa.time)
        surf.append(ds)
        wa_s.append(wa)
        wb_s.append(wb)
        grad.append(math.sqrt(integral))

    times = np.array(times)
    total = np.array(surf) + np.array(wa_s)
    ok = total > 0
    rate = 0.0
    if ok.sum() >= 2:
        rate = float(np.polyfit(times[ok], np.log(total[ok]), 1)[0])
    return StabilitySeries(times, np.array(surf), np.array(wa_s), np.array(wb_s), np.array(grad), rate)

