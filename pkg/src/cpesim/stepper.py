"""Picard time stepping of the reformulated systems.

Each step solves the linearized problem with coefficients frozen at the
midpoint of the previous time level and the current iterate, then
iterates until successive iterates agree in the space-time norm
``||s||_2 + ||v||_2 + sqrt(dt) ||grad v||_2``.  The surface variable is
transported explicitly (SSP-RK2) or by the implicit midpoint rule; the
momentum equation is Crank-Nicolson in the viscous operator with the
frozen forcing treated explicitly.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.fft as sfft

from cpesim import operators as ops
from cpesim.core import (
    CFLError,
    DiagnosticsRecord,
    Grid,
    NumericalError,
    PrimState,
    Regime,
    SimParams,
    SingularSystemError,
    l2_norm,
)
from cpesim.hydrostatics import density_from_surface, mass_flux_gravity, sigma_flux_vacuum

CFL_LIMIT = 0.5

# sources(t) -> (surface source 2D, momentum source 3D vector); used by the MMS harness
SourceFn = Callable[[float], tuple]


class PicardDivergenceError(NumericalError):
    def __init__(self, message: str, report: "PicardReport"):
        super().__init__(message)
        self.report = report


@dataclasses.dataclass
class PicardReport:
    iterations: int = 0
    final_residual: float = math.inf
    converged: bool = False
    residuals: list = dataclasses.field(default_factory=list)

    @property
    def contraction_estimates(self) -> list:
        r = self.residuals
        return [r[i] / r[i - 1] if r[i - 1] > 0 else 0.0 for i in range(1, len(r))]


# ------------------------------------------------------------ continuity


def check_cfl(v_bar: np.ndarray, grid: Grid, dt: float) -> None:
    vmax = float(np.max(np.abs(v_bar))) if v_bar.size else 0.0
    h = min(grid.hx, grid.hy)
    if vmax * dt / h > CFL_LIMIT:
        suggested = CFL_LIMIT * h / vmax
        raise CFLError(
            f"CFL violated: |v_bar|max*dt/h = {vmax * dt / h:.3g} > {CFL_LIMIT}; "
            f"try dt <= {suggested:.3g}",
            suggested,
        )


def gravity_transport_rhs(xi, a, b, c, plan):
    """-a . grad xi - b xi - c with products dealiased."""
    gx = ops.grad_h(xi, plan)
    return -ops.dealias(a[0] * gx[0] + a[1] * gx[1] + b * xi, plan) - c


def vacuum_transport_rhs(sigma, a, b, plan):
    """-(a . grad sigma + div(a sigma)) / 2 - (b - div a) sigma / 2.

    The skew-symmetric split keeps the semi-discrete integral of sigma**2
    invariant; the second term vanishes whenever b = div a.
    """
    gs = ops.grad_h(sigma, plan)
    da = ops.div_h(a, plan)
    adv = a[0] * gs[0] + a[1] * gs[1] + ops.div_h(a * sigma, plan)
    return -0.5 * adv - 0.5 * (b - da) * sigma


def _integrate(s, rhs, dt, scheme, tol=1e-15, max_iter=200):
    if scheme == "ssp_rk2":
        s1 = s + dt * rhs(s)
        return 0.5 * s + 0.5 * (s1 + dt * rhs(s1))
    if scheme == "midpoint":
        # x = s + dt * rhs((s + x) / 2); fixed-point iteration converges under the CFL bound
        x = s + dt * rhs(s)
        for _ in range(max_iter):
            x_new = s + dt * rhs(0.5 * (s + x))
            change = np.max(np.abs(x_new - x))
            x = x_new
            if change <= tol * max(1.0, np.max(np.abs(x))):
                return x
        raise NumericalError("implicit midpoint transport did not converge")
    raise ValueError(f"unknown scheme {scheme!r}")


def _apply_iota(s, params, grid, dt):
    if params.iota <= 0:
        return s
    plan = grid.plan
    shat, first = plan.forward(s)
    kx, ky = plan.kvec(shat, first, deriv=False)
    return plan.inverse(shat / (1.0 + params.iota * (kx**2 + ky**2) * dt), first)


def continuity_step_gravity(xi, v_in, params: SimParams, grid: Grid, dt: float, source=None):
    plan = grid.plan
    a = ops.vavg(v_in)
    check_cfl(a, grid, dt)
    div_v = ops.div_h(v_in, plan)
    b = ops.vavg(div_v)
    c = 0.5 * params.g * ops.vavg(grid.z_levels * div_v)
    if source is not None:
        c = c - source

    def rhs(s):
        return gravity_transport_rhs(s, a, b, c, plan)

    out = _integrate(xi, rhs, dt, params.scheme)
    return _apply_iota(out, params, grid, dt)


def continuity_step_vacuum(sigma, v_in, params: SimParams, grid: Grid, dt: float, source=None):
    plan = grid.plan
    a = ops.vavg(v_in)
    check_cfl(a, grid, dt)
    b = ops.vavg(ops.div_h(v_in, plan))

    def rhs(s):
        out = vacuum_transport_rhs(s, a, b, plan)
        return out if source is None else out + source

    out = _integrate(sigma, rhs, dt, params.scheme)
    return _apply_iota(out, params, grid, dt)


# ------------------------------------------------------------ forcing


def assemble_forcing(surface, v, params: SimParams, grid: Grid) -> np.ndarray:
    """Explicit momentum forcing for frozen input ``(surface, v)``.

    Advection rho (v . grad_h v + w d_z v) is discretized in the split
    form  (rho v.grad v + div(rho v v) - v f)/2 + (d_z(rho w v) + rho w d_z v + v f~)/2
    with f = div_h(rho v); it equals the plain form for smooth fields and
    keeps the kinetic-energy budget consistent with the continuity
    equation.
    """
    plan = grid.plan
    if params.regime is Regime.GRAVITY_GAMMA2:
        xi = surface
        z = grid.z_levels
        rho = xi[..., None] + 0.5 * params.g * z
        rho_w = mass_flux_gravity(xi, v, params.g, grid)
        f = ops.div_h(rho * v, plan)
        pressure = (2 * xi[..., None] + params.g * z) * ops.grad_h(xi, plan)[..., None]
    elif params.regime is Regime.VACUUM_NO_GRAVITY:
        sigma = surface
        rho = np.broadcast_to((sigma**2)[..., None], v.shape[1:])
        rho_w = sigma[..., None] * sigma_flux_vacuum(sigma, v, grid)
        f = ops.div_h(rho * v, plan)
        gam = params.gamma
        pressure = (2 * gam * sigma ** (2 * gam - 1) * ops.grad_h(sigma, plan))[..., None]
    else:
        raise ValueError(f"no forcing for regime {params.regime}")

    vhat, first = plan.forward(v)
    kx, ky = plan.kvec(vhat, first)
    gv = plan.inverse(np.stack([1j * kx * vhat, 1j * ky * vhat], axis=1), first + 1)
    adv = rho * (v[0] * gv[:, 0] + v[1] * gv[:, 1])
    tens = rho * v[:, None] * v[None, :]  # tens[i, j] = rho v_i v_j
    that, tfirst = plan.forward(tens)
    flux_div = plan.inverse(1j * (kx * that[:, 0] + ky * that[:, 1]), tfirst - 1)
    horiz = 0.5 * (adv + flux_div - v * f)

    ft = ops.vfluct(f)
    vert = 0.5 * (
        ops.d_z(rho_w * v, mode="sbp") + rho_w * ops.d_z(v, mode="sbp") + v * ft
    )
    return -ops.dealias(horiz + vert + pressure, plan)


# ------------------------------------------------------------ momentum


class Viscosity(NamedTuple):
    mu: float
    lam: float


class MomentumOperator:
    """Crank-Nicolson operator of the viscous momentum equation in reduced variables.

    Unknowns are interior levels ``x`` (shape ``(2, nx, ny, nz-2)``); the
    full field is ``E x``.  The system is
    ``(M_rho / dt + K / 2) x = M_rho x_n / dt - K x_n / 2 + E^T Q F``
    with ``M_rho = E^T Q rho E`` and K the Neumann viscous form.  It is
    solved by conjugate gradients preconditioned with the exact per-mode
    block solve for the horizontally averaged density profile.
    """

    def __init__(self, grid: Grid, params, dt: float, rho_ref: np.ndarray):
        # ``params`` only needs ``mu`` and ``lam`` (a SimParams or a Viscosity)
        self.grid = grid
        self.params = params
        self.dt = dt
        self.vert = grid.vertical
        self.rho_ref = np.asarray(rho_ref, dtype=np.float64)
        vert = self.vert
        self._khalf = self._blocks(0.5 * params.mu * vert.stiff, 0.5)
        mrho = vert.E.T @ ((vert.q * self.rho_ref)[:, None] * vert.E)
        try:
            self._inv = np.linalg.inv(self._blocks(mrho / dt + 0.5 * params.mu * vert.stiff, 0.5))
        except np.linalg.LinAlgError as exc:
            raise SingularSystemError("momentum preconditioner is singular") from exc

    def _blocks(self, base: np.ndarray, scale: float) -> np.ndarray:
        """Per-mode ``2m x 2m`` matrices ``I (base + s mu k^2 Mq) + s (mu+lam) k k^T Mq``."""
        vert, plan, p = self.vert, self.grid.plan, self.params
        m = vert.nz - 2
        Mq = vert.mass
        k2 = plan.kx[:, None] ** 2 + plan.ky[None, :] ** 2
        kd = (
            np.broadcast_to(plan.kx_d[:, None], k2.shape),
            np.broadcast_to(plan.ky_d[None, :], k2.shape),
        )
        mats = np.zeros(k2.shape + (2 * m, 2 * m))
        for c in range(2):
            blk = slice(c * m, (c + 1) * m)
            mats[..., blk, blk] += base + scale * p.mu * k2[..., None, None] * Mq
            for c2 in range(2):
                blk2 = slice(c2 * m, (c2 + 1) * m)
                mats[..., blk, blk2] += scale * (p.mu + p.lam) * (kd[c] * kd[c2])[..., None, None] * Mq
        return mats

    def _modal(self, mats: np.ndarray, r: np.ndarray) -> np.ndarray:
        """Apply per-mode matrices to a reduced field via the real FFT."""
        m = self.vert.nz - 2
        nx, ny = self.grid.nx, self.grid.ny
        nyh = ny // 2 + 1
        rhat = sfft.rfftn(r, axes=(1, 2), workers=ops.fft_workers())
        rh = np.moveaxis(rhat, 0, 2).reshape(nx, nyh, 2 * m)
        pair = np.stack([rh.real, rh.imag], axis=-1)
        out = mats @ pair
        xh = (out[..., 0] + 1j * out[..., 1]).reshape(nx, nyh, 2, m)
        return sfft.irfftn(np.moveaxis(xh, 2, 0), s=(nx, ny), axes=(1, 2), workers=ops.fft_workers())

    def precondition(self, r: np.ndarray) -> np.ndarray:
        return self._modal(self._inv, r)

    def viscous_form(self, vq: np.ndarray, vstiff: np.ndarray) -> np.ndarray:
        """mu(-lap)(vq) + (mu+lam)(-grad div)(vq) + mu vstiff."""
        p, plan = self.params, self.grid.plan
        out = -p.mu * ops.laplace_h(vq, plan)
        if p.mu + p.lam != 0:
            out -= (p.mu + p.lam) * ops.grad_h(ops.div_h(vq, plan), plan)
        return out + p.mu * vstiff

    def mass_apply(self, x: np.ndarray, rho_eff: np.ndarray) -> np.ndarray:
        full = self.vert.extend(x)
        return (full * rho_eff * self.vert.q) @ self.vert.E

    def apply(self, x: np.ndarray, rho_eff: np.ndarray) -> np.ndarray:
        return self.mass_apply(x, rho_eff) / self.dt + self._modal(self._khalf, x)

    def rhs(self, v_n: np.ndarray, rho_eff: np.ndarray, forcing: np.ndarray) -> np.ndarray:
        vert = self.vert
        vq = (v_n * vert.q) @ vert.E
        visc = self.viscous_form(vq, v_n @ vert.K @ vert.E)
        mass = (v_n * rho_eff * vert.q) @ vert.E
        return mass / self.dt - 0.5 * visc + (forcing * vert.q) @ vert.E

    def solve(self, b: np.ndarray, rho_eff: np.ndarray, x0=None, rtol=1e-13, max_iter=500):
        x = self.precondition(b) if x0 is None else x0.copy()
        r = b - self.apply(x, rho_eff)
        bnorm = math.sqrt(float(np.vdot(b, b)))
        if bnorm == 0.0:
            return np.zeros_like(b), 0
        z = self.precondition(r)
        p = z.copy()
        rz = float(np.vdot(r, z))
        for it in range(max_iter + 1):
            rnorm = math.sqrt(float(np.vdot(r, r)))
            if rnorm <= rtol * bnorm:
                return x, it
            Ap = self.apply(p, rho_eff)
            pAp = float(np.vdot(p, Ap))
            if not pAp > 0:
                raise SingularSystemError("momentum operator is not positive definite")
            alpha = rz / pAp
            x += alpha * p
            r -= alpha * Ap
            z = self.precondition(r)
            rz_new = float(np.vdot(r, z))
            p = z + (rz_new / rz) * p
            rz = rz_new
        raise NumericalError(f"momentum CG did not converge in {max_iter} iterations")


def effective_mass(rho: np.ndarray, params: SimParams) -> np.ndarray:
    if params.regime is Regime.VACUUM_NO_GRAVITY:
        return np.maximum(rho, params.mass_lift)
    return rho


def solve_momentum_system(
    rho_eff, forcing, v_n, coeffs, grid: Grid, dt: float, *, operator=None, guess=None, rtol=1e-13
):
    """Crank-Nicolson solve for a given positive mass density; returns ``(v_new, cg_iters)``."""
    if operator is None:
        operator = MomentumOperator(grid, coeffs, dt, rho_eff.mean(axis=(0, 1)))
    b = operator.rhs(v_n, rho_eff, forcing)
    x0 = None if guess is None else grid.vertical.restrict(guess)
    x, iters = operator.solve(b, rho_eff, x0=x0, rtol=rtol)
    return grid.vertical.extend(x), iters


def momentum_solve(
    rho,
    forcing,
    v_n,
    params: SimParams,
    grid: Grid,
    dt: float,
    *,
    operator=None,
    guess=None,
    rtol=1e-13,
    return_iters=False,
):
    """One Crank-Nicolson step of ``rho v_t = mu lap v + mu v_zz + (mu+lam) grad div v + F``."""
    rho_eff = effective_mass(np.asarray(rho, dtype=np.float64), params)
    if rho_eff.min() <= 0:
        raise SingularSystemError("momentum solve needs a positive density")
    v_new, iters = solve_momentum_system(
        rho_eff, forcing, v_n, params, grid, dt, operator=operator, guess=guess, rtol=rtol
    )
    return (v_new, iters) if return_iters else v_new


# ------------------------------------------------------------ Picard


def grad_sq_integral(v: np.ndarray, grid: Grid) -> float:
    """||grad v||^2: spectral horizontal part plus vertical midpoint differences."""
    plan = grid.plan
    modes = ops.horizontal_modes_energy(v, plan)
    k2 = plan.kx[:, None] ** 2 + plan.ky[None, :] ** 2
    horiz = np.sum(modes * k2[..., None] * grid.quad_weights)
    vertical = np.sum(grid.vertical.stiffness_energy(v))
    return float(horiz + vertical / (grid.nx * grid.ny))


def vnorm(surface: np.ndarray, v: np.ndarray, grid: Grid, dt: float) -> float:
    return (
        l2_norm(surface, grid)
        + l2_norm(v, grid)
        + math.sqrt(dt * max(grad_sq_integral(v, grid), 0.0))
    )


class Stepper:
    """Advances a ``PrimState``; caches the momentum preconditioner between steps."""

    def __init__(self, params: SimParams, grid: Grid, sources: Optional[SourceFn] = None):
        if params.regime is Regime.FREE_BOUNDARY:
            raise ValueError("use free_boundary.fb_advance for the free-boundary regime")
        self.params = params
        self.grid = grid
        self.sources = sources
        self._op = None
        self._op_key = None

    def _operator(self, rho_eff: np.ndarray) -> MomentumOperator:
        # The reference profile only shapes the preconditioner.  Rounding it
        # keeps the operator a pure function of the step's initial state (so
        # resumed runs reproduce it) while letting steps share the cache.
        ref = np.array([float(f"{r:.6e}") for r in rho_eff.mean(axis=(0, 1))])
        key = ref.tobytes()
        if key != self._op_key:
            self._op = MomentumOperator(self.grid, self.params, self.params.dt, ref)
            self._op_key = key
        return self._op

    def advance(self, state: PrimState):
        p, grid = self.params, self.grid
        dt = p.dt
        report = PicardReport()
        if p.picard_max_iter <= 0:
            raise PicardDivergenceError("picard_max_iter = 0: no iterations allowed", report)

        gravity = p.regime is Regime.GRAVITY_GAMMA2
        cont = continuity_step_gravity if gravity else continuity_step_vacuum
        s_n, v_n = state.surface_var, state.v
        s_k, v_k = s_n, v_n
        op = self._operator(effective_mass(density_from_surface(s_n, p, grid), p))
        s_src = v_src = None
        if self.sources is not None:
            s_src, v_src = self.sources(state.time + 0.5 * dt)

        for it in range(1, p.picard_max_iter + 1):
            s_o = 0.5 * (s_n + s_k)
            v_o = 0.5 * (v_n + v_k)
            s_new = cont(s_n, v_o, p, grid, dt, source=s_src)
            rho_o = density_from_surface(s_o, p, grid)
            forcing = assemble_forcing(s_o, v_o, p, grid)
            if v_src is not None:
                forcing = forcing + v_src
            rho_eff = effective_mass(rho_o, p)
            if gravity and rho_eff.min() <= 0:
                raise SingularSystemError("non-positive density in momentum solve")
            # inexact Picard: the linear solve only needs to beat the current iterate error
            rtol = 1e-6 if not report.residuals else min(1e-6, max(1e-13, 1e-3 * report.residuals[-1]))
            v_new = momentum_solve(
                rho_o, forcing, v_n, p, grid, dt, operator=op, guess=v_k, rtol=rtol
            )

            diff = vnorm(s_new - s_k, v_new - v_k, grid, dt)
            scale = vnorm(s_new, v_new, grid, dt)
            res = diff / scale if scale > 0 else diff
            report.residuals.append(res)
            report.iterations = it
            report.final_residual = res
            s_k, v_k = s_new, v_new
            if not np.isfinite(res):
                break
            if res <= p.picard_tol:
                report.converged = True
                break

        if not report.converged:
            raise PicardDivergenceError(
                f"Picard iteration did not converge in {p.picard_max_iter} iterations "
                f"(residuals {report.residuals})",
                report,
            )
        return PrimState(s_k, v_k, state.time + dt), report


def picard_advance(state: PrimState, params: SimParams, grid: Grid, sources=None):
    return Stepper(params, grid, sources).advance(state)


def run(
    state: PrimState,
    params: SimParams,
    grid: Grid,
    n_steps: int,
    sink: Optional[Callable[[DiagnosticsRecord], None]] = None,
    *,
    stepper: Optional[Stepper] = None,
    on_step: Optional[Callable[[int, PrimState], None]] = None,
) -> PrimState:
    """Advance ``n_steps`` Picard steps, emitting one record per step to ``sink``."""
    from cpesim.diagnostics import record

    stepper = stepper or Stepper(params, grid)
    current = state
    for n in range(n_steps):
        current, report = stepper.advance(current)
        if sink is not None:
            sink(record(current, params, grid, report.iterations))
        if on_step is not None:
            on_step(n + 1, current)
    return current


def collect(state, params, grid, n_steps, **kw) -> tuple[PrimState, list]:
    """Like :func:`run` but returns the records (initial record first)."""
    from cpesim.diagnostics import record

    records = [record(state, params, grid, 0)]
    final = run(state, params, grid, n_steps, records.append, **kw)
    return final, records
