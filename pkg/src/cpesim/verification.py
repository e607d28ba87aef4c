"""Manufactured solutions, convergence measurement and a dense momentum oracle.

Analytic fields are finite sums of trigonometric atoms

    c * X(2 pi m_x x) * Y(2 pi m_y y) * z^p Zf(pi m_z z) * T(omega t)

with each factor a cosine or sine.  Derivatives, vertical averages and
cumulative vertical integrals of atoms have closed forms, so the residual
of the exact PDE operators can be evaluated without a symbolic engine.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, Sequence

import numpy as np

from cpesim import operators as ops
from cpesim.core import Grid, ParameterError, PrimState, Regime, SimParams, l2_norm, make_state

_TRIG = {"cos": np.cos, "sin": np.sin}


def _trig(kind: str, arg):
    return _TRIG[kind](arg)


def _dtrig(kind: str, a: float):
    """d/ds of kind(a s) -> (new kind, factor)."""
    return ("sin", -a) if kind == "cos" else ("cos", a)


@dataclasses.dataclass(frozen=True)
class Atom:
    coef: float
    x: tuple = ("cos", 0)
    y: tuple = ("cos", 0)
    z: tuple = ("cos", 0)
    t: tuple = ("cos", 0.0)
    zpow: int = 0

    @property
    def ax(self):
        return 2 * math.pi * self.x[1]

    @property
    def ay(self):
        return 2 * math.pi * self.y[1]

    @property
    def az(self):
        return math.pi * self.z[1]

    def horizontal(self, x, y):
        return _trig(self.x[0], self.ax * x) * _trig(self.y[0], self.ay * y)

    def time_factor(self, t):
        return _trig(self.t[0], self.t[1] * t)

    def vertical(self, z):
        return z**self.zpow * _trig(self.z[0], self.az * z)

    def __call__(self, x, y, z, t):
        return self.coef * self.horizontal(x, y) * self.vertical(z) * self.time_factor(t)

    def vertical_cumint(self, z):
        """int_0^z zeta^p Zf(a zeta) d zeta in closed form (p in {0, 1})."""
        kind, a = self.z[0], self.az
        z = np.asarray(z, dtype=np.float64)
        if self.zpow == 0:
            if kind == "cos":
                return z if a == 0 else np.sin(a * z) / a
            return np.zeros_like(z) if a == 0 else (1 - np.cos(a * z)) / a
        if self.zpow == 1:
            if kind == "cos":
                return z**2 / 2 if a == 0 else z * np.sin(a * z) / a + (np.cos(a * z) - 1) / a**2
            return np.zeros_like(z) if a == 0 else -z * np.cos(a * z) / a + np.sin(a * z) / a**2
        raise ParameterError("vertical integrals support z-powers 0 and 1 only")


@dataclasses.dataclass(frozen=True)
class TrigField:
    atoms: tuple = ()

    def __call__(self, x, y, z, t):
        out = 0.0
        for a in self.atoms:
            out = out + a(x, y, z, t)
        return out + 0.0 * (x + y + z)  # broadcast even for the zero field

    def __add__(self, other: "TrigField") -> "TrigField":
        return TrigField(self.atoms + other.atoms)

    def scale(self, c: float) -> "TrigField":
        return TrigField(tuple(dataclasses.replace(a, coef=a.coef * c) for a in self.atoms))

    def _derive(self, axis: str) -> "TrigField":
        out = []
        for a in self.atoms:
            kind, m = getattr(a, axis)
            k = {"x": a.ax, "y": a.ay, "z": a.az, "t": a.t[1]}[axis]
            nk, f = _dtrig(kind, k)
            if f != 0:
                out.append(dataclasses.replace(a, coef=a.coef * f, **{axis: (nk, m)}))
            if axis == "z" and a.zpow > 0:
                out.append(dataclasses.replace(a, coef=a.coef * a.zpow, zpow=a.zpow - 1))
        return TrigField(tuple(out))

    def dx(self):
        return self._derive("x")

    def dy(self):
        return self._derive("y")

    def dz(self):
        return self._derive("z")

    def dt(self):
        return self._derive("t")

    def times_z(self) -> "TrigField":
        return TrigField(tuple(dataclasses.replace(a, zpow=a.zpow + 1) for a in self.atoms))

    def cumint_z(self, x, y, z, t):
        out = 0.0
        for a in self.atoms:
            out = out + a.coef * a.horizontal(x, y) * a.vertical_cumint(z) * a.time_factor(t)
        return out + 0.0 * (x + y + z)

    def mean_z(self, x, y, t):
        return self.cumint_z(x, y, 1.0, t)


def atom(coef, x=("cos", 0), y=("cos", 0), z=("cos", 0), t=("cos", 0.0)) -> TrigField:
    return TrigField((Atom(float(coef), tuple(x), tuple(y), tuple(z), (t[0], float(t[1]))),))


def constant(c: float) -> TrigField:
    return atom(c)


@dataclasses.dataclass(frozen=True)
class AnalyticSpec:
    """Exact surface variable (no z dependence) and horizontal velocity."""

    surface: TrigField
    v: tuple  # (TrigField, TrigField)

    def fields(self, grid: Grid, t: float):
        X, Y = grid.mesh2d()
        x, y, z = grid.mesh3d()
        s = self.surface(X, Y, 0.0, t)
        v = np.stack([self.v[0](x, y, z, t), self.v[1](x, y, z, t)])
        return s, v

    def state(self, grid: Grid, params: SimParams, t: float = 0.0, *, project: bool = True) -> PrimState:
        s, v = self.fields(grid, t)
        state = make_state(grid, s, v, params, project=project)
        return PrimState(state.surface_var, state.v, t)


def rest_spec(level: float = 1.0) -> AnalyticSpec:
    return AnalyticSpec(constant(level), (TrigField(), TrigField()))


def standard_spec(eps: float = 0.1) -> AnalyticSpec:
    """xi = 1 + eps cos(2 pi x) cos t, v = eps (sin(2 pi y) cos(pi z) sin t, 0)."""
    surface = constant(1.0) + atom(eps, x=("cos", 1), t=("cos", 1.0))
    vx = atom(eps, y=("sin", 1), z=("cos", 1), t=("sin", 1.0))
    return AnalyticSpec(surface, (vx, TrigField()))


def column_spec(eps: float = 0.1) -> AnalyticSpec:
    """z-independent velocity: the vertical discretization is exact for it."""
    surface = constant(1.0) + atom(eps, x=("cos", 1), t=("cos", 1.0))
    vx = atom(eps, y=("sin", 1), t=("sin", 1.0))
    vy = atom(eps, x=("cos", 1), t=("cos", 1.0))
    return AnalyticSpec(surface, (vx, vy))


def _check_neumann(spec: AnalyticSpec, t: float = 0.37) -> None:
    xs = np.linspace(0, 1, 7, endpoint=False)
    x, y, z = np.meshgrid(xs, xs, np.array([0.0, 1.0]), indexing="ij")
    for comp in spec.v:
        dz = comp.dz()(x, y, z, t)
        if np.max(np.abs(dz)) > 1e-12:
            raise ParameterError("velocity spec must satisfy dz v = 0 at z = 0 and z = 1")
    if any(a.z[1] != 0 or a.zpow != 0 for a in spec.surface.atoms):
        raise ParameterError("surface spec must not depend on z")


def mms_forcing(spec: AnalyticSpec, params: SimParams, grid: Grid, t: float, *, include_viscous: bool = True):
    """Residuals ``(S_surface, S_v)`` of the exact solution in the continuity and momentum equations.

    The stepper solves ``s_t = L(s, v) + S_surface`` and
    ``rho v_t = viscous(v) + F(s, v) + S_v``.
    """
    _check_neumann(spec)
    X, Y = grid.mesh2d()
    x, y, z = grid.mesh3d()
    s_f, (v0, v1) = spec.surface, spec.v
    mu, lam = (params.mu, params.lam) if include_viscous else (0.0, 0.0)

    s = s_f(X, Y, 0.0, t)
    s_t = s_f.dt()(X, Y, 0.0, t)
    gs = np.stack([s_f.dx()(X, Y, 0.0, t), s_f.dy()(X, Y, 0.0, t)])
    div_f = v0.dx() + v1.dy()

    vbar = np.stack([v0.mean_z(X, Y, t), v1.mean_z(X, Y, t)])
    avgdiv = div_f.mean_z(X, Y, t)
    zeta = z  # 3D z coordinate
    vt_cum = np.stack([v0.cumint_z(x, y, z, t), v1.cumint_z(x, y, z, t)]) - zeta * vbar[..., None]
    dt_cum = div_f.cumint_z(x, y, z, t) - zeta * avgdiv[..., None]

    v = np.stack([v0(x, y, z, t), v1(x, y, z, t)])
    v_t = np.stack([v0.dt()(x, y, z, t), v1.dt()(x, y, z, t)])
    v_z = np.stack([v0.dz()(x, y, z, t), v1.dz()(x, y, z, t)])
    v_zz = np.stack([v0.dz().dz()(x, y, z, t), v1.dz().dz()(x, y, z, t)])
    vdx = np.stack([v0.dx()(x, y, z, t), v1.dx()(x, y, z, t)])
    vdy = np.stack([v0.dy()(x, y, z, t), v1.dy()(x, y, z, t)])
    lap_h = np.stack([(c.dx().dx() + c.dy().dy())(x, y, z, t) for c in (v0, v1)])
    grad_div = np.stack([div_f.dx()(x, y, z, t), div_f.dy()(x, y, z, t)])
    viscous = mu * lap_h + mu * v_zz + (mu + lam) * grad_div
    v_grad_v = v[0] * vdx + v[1] * vdy

    if params.regime is Regime.GRAVITY_GAMMA2:
        g = params.g
        avgzdiv = div_f.times_z().mean_z(X, Y, t)
        s_res = s_t + vbar[0] * gs[0] + vbar[1] * gs[1] + s * avgdiv + 0.5 * g * avgzdiv
        zd_cum = div_f.times_z().cumint_z(x, y, z, t) - zeta * avgzdiv[..., None]
        rho_w = -(
            gs[0][..., None] * vt_cum[0]
            + gs[1][..., None] * vt_cum[1]
            + s[..., None] * dt_cum
            + 0.5 * g * zd_cum
        )
        rho = s[..., None] + 0.5 * g * zeta
        pressure = (2 * s[..., None] + g * zeta) * gs[..., None]
    elif params.regime is Regime.VACUUM_NO_GRAVITY:
        s_res = s_t + vbar[0] * gs[0] + vbar[1] * gs[1] + 0.5 * s * avgdiv
        sigma_w = -(
            s[..., None] * dt_cum + 2 * (gs[0][..., None] * vt_cum[0] + gs[1][..., None] * vt_cum[1])
        )
        rho_w = s[..., None] * sigma_w
        rho = np.broadcast_to((s**2)[..., None], z.shape)
        gam = params.gamma
        pressure = (2 * gam * s ** (2 * gam - 1) * gs)[..., None] * np.ones_like(z)
    else:
        raise ParameterError("manufactured solutions cover the gravity and vacuum regimes")

    v_res = rho * (v_t + v_grad_v) + rho_w * v_z + pressure - viscous
    return s_res, v_res


def mms_sources(spec: AnalyticSpec, params: SimParams, grid: Grid) -> Callable[[float], tuple]:
    return lambda t: mms_forcing(spec, params, grid, t)


def mms_error(spec: AnalyticSpec, params: SimParams, grid: Grid, t_end: float) -> float:
    """Run the stepper with manufactured sources and return the L2 error at ``t_end``."""
    from cpesim.stepper import Stepper

    n = int(round(t_end / params.dt))
    if n < 1 or abs(n * params.dt - t_end) > 1e-12 * max(1.0, t_end):
        raise ParameterError("t_end must be a positive multiple of dt")
    stepper = Stepper(params, grid, mms_sources(spec, params, grid))
    state = spec.state(grid, params, 0.0)
    for _ in range(n):
        state, _ = stepper.advance(state)
    s_ex, v_ex = spec.fields(grid, state.time)
    return l2_norm(state.surface_var - s_ex, grid) + l2_norm(state.v - v_ex, grid)


def horizontal_consistency(spec: AnalyticSpec, params: SimParams, grid: Grid, t: float) -> float:
    """Max deviation of the discrete continuity and forcing terms from their exact values.

    Meant for band-limited specs whose vertical terms vanish identically
    (z-independent velocity, and g = 0 in the gravity regime), so the only
    discretization left is the horizontal spectral one.
    """
    from cpesim.stepper import assemble_forcing, gravity_transport_rhs, vacuum_transport_rhs

    plan = grid.plan
    s, v = spec.fields(grid, t)
    s_res, v_res = mms_forcing(spec, params, grid, t, include_viscous=False)
    s_t = spec.surface.dt()(*grid.mesh2d(), 0.0, t)
    x, y, z = grid.mesh3d()
    v_t = np.stack([c.dt()(x, y, z, t) for c in spec.v])

    a = ops.vavg(v)
    div_v = ops.div_h(v, plan)
    b = ops.vavg(div_v)
    if params.regime is Regime.GRAVITY_GAMMA2:
        c = 0.5 * params.g * ops.vavg(grid.z_levels * div_v)
        cont = gravity_transport_rhs(s, a, b, c, plan)
        rho = s[..., None] + 0.5 * params.g * grid.z_levels
    else:
        cont = vacuum_transport_rhs(s, a, b, plan)
        rho = np.broadcast_to((s**2)[..., None], z.shape)
    forcing = assemble_forcing(s, v, params, grid)
    return max(
        float(np.max(np.abs(cont - (s_t - s_res)))),
        float(np.max(np.abs(forcing - (rho * v_t - v_res)))),
    )


@dataclasses.dataclass
class ConvergenceResult:
    steps: np.ndarray
    errors: np.ndarray
    pairwise: np.ndarray
    order: float
    monotone: bool
    exact: bool

    def as_rows(self):
        rows = [(float(h), float(e), "") for h, e in zip(self.steps, self.errors)]
        for i, p in enumerate(self.pairwise):
            rows[i + 1] = (rows[i + 1][0], rows[i + 1][1], float(p))
        return rows


def convergence_order(steps: Sequence[float], errors: Sequence[float], exact_tol: float = 1e-14):
    """Observed order from errors at successively refined steps (h or dt).

    ``order`` is the least-squares slope of log(error) against log(step);
    errors that all vanish are reported as ``exact`` with an infinite order.
    """
    h = np.asarray(steps, dtype=np.float64)
    e = np.abs(np.asarray(errors, dtype=np.float64))
    if h.size < 3 or e.size != h.size:
        raise ValueError("need at least three resolutions with matching errors")
    if np.all(e <= exact_tol):
        return ConvergenceResult(h, e, np.full(h.size - 1, np.inf), math.inf, True, True)
    monotone = bool(np.all(np.diff(e) < 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        pairwise = np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])
    ok = e > 0
    order = float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0]) if ok.sum() >= 2 else math.nan
    return ConvergenceResult(h, e, pairwise, order, monotone, False)


def vertical_order_study(params: SimParams, nzs=(9, 17, 33), nh: int = 12, t_end: float = 0.05):
    """Spatial refinement in z with the standard spec (cos(pi z) velocity profile)."""
    spec = standard_spec()
    errs = [mms_error(spec, params, Grid(nh, nh, nz), t_end) for nz in nzs]
    return convergence_order([1.0 / (nz - 1) for nz in nzs], errs)


def temporal_order_study(params: SimParams, dts=(0.02, 0.01, 0.005), nh: int = 12, nz: int = 5, t_end: float = 0.2):
    """dt refinement with a z-independent spec, for which the spatial error is roundoff."""
    spec = column_spec()
    grid = Grid(nh, nh, nz)
    errs = [mms_error(spec, params.replace(dt=dt), grid, t_end) for dt in dts]
    return convergence_order(dts, errs)


# ------------------------------------------------------------ dense oracle


def _fourier_matrices(n: int):
    """Dense first-derivative (Nyquist dropped) and second-derivative matrices on n points."""
    m = np.fft.fftfreq(n, 1.0 / n)
    k = 2 * np.pi * m
    kd = np.where(np.abs(m) == n // 2, 0.0, k)
    j = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(j, j) / n)  # forward DFT
    Finv = np.conj(F) / n
    D1 = np.real(Finv @ np.diag(1j * kd) @ F)
    D2 = np.real(Finv @ np.diag(-(k**2)) @ F)
    return D1, D2


def _vertical_matrices(nz: int):
    h = 1.0 / (nz - 1)
    q = np.full(nz, h)
    q[0] = q[-1] = h / 2
    K = np.zeros((nz, nz))
    for k in range(nz - 1):  # sum over cells of h * ((v[k+1]-v[k])/h)^2
        K[k : k + 2, k : k + 2] += np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
    C = np.zeros((2, nz))
    C[0, :3] = [-3.0, 4.0, -1.0]
    C[1, -3:] = [1.0, -4.0, 3.0]
    return np.diag(q), K, C


def dense_momentum_matrix(rho_eff: np.ndarray, coeffs, grid: Grid, dt: float):
    """Assemble the Crank-Nicolson system as one dense saddle-point matrix.

    Unknowns are all levels of both components (row-major ``(c, i, j, k)``)
    plus Lagrange multipliers enforcing zero one-sided dz at both ends.
    Returns ``(lhs, explicit_part, load)`` with ``explicit_part`` the matrix
    acting on ``v_n`` and ``load`` the matrix acting on the forcing.
    """
    nx, ny, nz = grid.nx, grid.ny, grid.nz
    if nx * ny * nz > 4096:
        raise ValueError("dense oracle is limited to nx*ny*nz <= 4096")
    mu, lam = coeffs.mu, coeffs.lam
    dx1, dx2 = _fourier_matrices(nx)
    dy1, dy2 = _fourier_matrices(ny)
    Ix, Iy, Iz = np.eye(nx), np.eye(ny), np.eye(nz)
    Dx = np.kron(dx1, Iy)
    Dy = np.kron(Ix, dy1)
    Lap = np.kron(dx2, Iy) + np.kron(Ix, dy2)
    Ih = np.eye(nx * ny)
    Q, Kz, C = _vertical_matrices(nz)

    D = [Dx, Dy]
    n3 = nx * ny * nz
    visc = np.zeros((2 * n3, 2 * n3))
    for a in range(2):
        sa = slice(a * n3, (a + 1) * n3)
        visc[sa, sa] += mu * np.kron(-Lap, Q) + mu * np.kron(Ih, Kz)
        for b in range(2):
            sb = slice(b * n3, (b + 1) * n3)
            visc[sa, sb] += (mu + lam) * np.kron(-D[a] @ D[b], Q)
    qrho = np.tile((rho_eff * np.diag(Q)).reshape(-1), 2)
    mass = np.diag(qrho) / dt
    load = np.kron(np.eye(2 * nx * ny), Q)

    cons = np.kron(np.eye(2 * nx * ny), C)
    nc = cons.shape[0]
    lhs = np.zeros((2 * n3 + nc, 2 * n3 + nc))
    lhs[: 2 * n3, : 2 * n3] = mass + 0.5 * visc
    lhs[: 2 * n3, 2 * n3 :] = cons.T
    lhs[2 * n3 :, : 2 * n3] = cons
    return lhs, mass - 0.5 * visc, load


def dense_oracle_momentum(rho_eff, forcing, v_n, coeffs, grid: Grid, dt: float) -> np.ndarray:
    """Dense LU solve of one Crank-Nicolson momentum step (independent of the FFT path)."""
    import scipy.linalg as sla

    lhs, explicit, load = dense_momentum_matrix(np.asarray(rho_eff, dtype=np.float64), coeffs, grid, dt)
    n = 2 * grid.nx * grid.ny * grid.nz
    rhs = np.zeros(lhs.shape[0])
    rhs[:n] = explicit @ np.asarray(v_n).reshape(-1) + load @ np.asarray(forcing).reshape(-1)
    try:
        lu = sla.lu_factor(lhs, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise np.linalg.LinAlgError("dense momentum system is singular") from exc
    if np.any(np.abs(np.diag(lu[0])) < 1e-14 * np.max(np.abs(np.diag(lu[0])))):
        raise np.linalg.LinAlgError("dense momentum system is singular")
    sol = sla.lu_solve(lu, rhs)
    return sol[:n].reshape(np.asarray(v_n).shape)
