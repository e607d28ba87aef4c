"""Parameters, grids and state containers shared by every solver component."""

from __future__ import annotations

import dataclasses
import enum
import functools
import math
from typing import Optional

import numpy as np


class CPEError(Exception):
    """Base class for all simulation errors."""


class ShapeError(CPEError, ValueError):
    """A field does not match the grid it is used with."""


class ParameterError(CPEError, ValueError):
    """Invalid physical or numerical parameters."""


class NumericalError(CPEError):
    """A numerical failure (CFL, negative density, divergence, ...)."""


class NegativeDensityError(NumericalError):
    pass


class CFLError(NumericalError):
    def __init__(self, message: str, suggested_dt: float):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class SingularSystemError(NumericalError):
    pass


class Regime(enum.Enum):
    GRAVITY_GAMMA2 = "gravity_gamma2"
    VACUUM_NO_GRAVITY = "vacuum_no_gravity"
    FREE_BOUNDARY = "free_boundary"

    @property
    def tag(self) -> int:
        return _REGIME_TAGS[self]

    @classmethod
    def from_tag(cls, tag: int) -> "Regime":
        for regime, value in _REGIME_TAGS.items():
            if value == tag:
                return regime
        raise ValueError(f"unknown regime tag {tag}")


_REGIME_TAGS = {
    Regime.GRAVITY_GAMMA2: 1,
    Regime.VACUUM_NO_GRAVITY: 2,
    Regime.FREE_BOUNDARY: 3,
}

# Mass-matrix lift used where the density degenerates (vacuum regime).
MASS_LIFT_MIN = 1e-10


@dataclasses.dataclass(frozen=True)
class SimParams:
    """Physical constants and numerical controls.

    ``iota`` is the optional horizontal diffusion added to the surface
    transport equation; ``rho_floor`` is the density floor below which the
    vertical velocity is left undefined.
    """

    regime: Regime
    mu: float = 1.0
    lam: float = 0.0
    gamma: float = 2.0
    g: float = 0.0
    dt: float = 1e-3
    t_end: float = 0.1
    picard_tol: float = 1e-10
    picard_max_iter: int = 20
    iota: float = 0.0
    rho_floor: float = 0.0
    transport_scheme: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.regime, Regime):
            object.__setattr__(self, "regime", Regime(self.regime))
        self.validate()

    def validate(self) -> None:
        if not self.gamma > 1:
            raise ParameterError(f"gamma must be > 1, got {self.gamma}")
        if self.regime is Regime.GRAVITY_GAMMA2 and self.gamma != 2:
            raise ParameterError(
                "gravity regime is only formulated for gamma = 2 "
                f"(got gamma = {self.gamma})"
            )
        if self.regime is Regime.FREE_BOUNDARY:
            if self.mu != 0 or self.lam != 0:
                raise ParameterError("free-boundary regime is inviscid: mu = lambda = 0")
        else:
            if not self.mu > 0:
                raise ParameterError(f"mu must be > 0, got {self.mu}")
            if not self.mu + self.lam > 0:
                raise ParameterError("mu + lambda must be > 0")
        if self.g < 0:
            raise ParameterError(f"g must be >= 0, got {self.g}")
        if self.regime is Regime.VACUUM_NO_GRAVITY and self.g != 0:
            raise ParameterError("vacuum regime is gravity-free: g must be 0")
        if not self.dt > 0:
            raise ParameterError(f"dt must be > 0, got {self.dt}")
        if not self.picard_tol > 0:
            raise ParameterError(f"picard_tol must be > 0, got {self.picard_tol}")
        if self.picard_max_iter < 0:
            raise ParameterError("picard_max_iter must be >= 0")
        if self.iota < 0:
            raise ParameterError("iota must be >= 0")
        if self.rho_floor < 0:
            raise ParameterError("rho_floor must be >= 0")
        if self.transport_scheme not in (None, "ssp_rk2", "midpoint"):
            raise ParameterError(f"unknown transport scheme {self.transport_scheme!r}")

    @property
    def mass_lift(self) -> float:
        return max(self.rho_floor, MASS_LIFT_MIN)

    @property
    def scheme(self) -> str:
        if self.transport_scheme is not None:
            return self.transport_scheme
        return "midpoint" if self.regime is Regime.VACUUM_NO_GRAVITY else "ssp_rk2"

    def replace(self, **changes) -> "SimParams":
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True)
class Grid:
    """Periodic ``[0,1)^2`` collocation grid times ``nz`` uniform levels on ``[0,1]``."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for name in ("nx", "ny"):
            n = getattr(self, name)
            if n < 4 or n % 2:
                raise ParameterError(f"{name} must be even and >= 4, got {n}")
        if self.nz < 3:
            raise ParameterError(f"nz must be >= 3, got {self.nz}")

    @property
    def hz(self) -> float:
        return 1.0 / (self.nz - 1)

    @property
    def hx(self) -> float:
        return 1.0 / self.nx

    @property
    def hy(self) -> float:
        return 1.0 / self.ny

    @functools.cached_property
    def z_levels(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nz)

    @functools.cached_property
    def quad_weights(self) -> np.ndarray:
        w = np.full(self.nz, self.hz)
        w[0] = w[-1] = 0.5 * self.hz
        return w

    @functools.cached_property
    def x(self) -> np.ndarray:
        return np.arange(self.nx) / self.nx

    @functools.cached_property
    def y(self) -> np.ndarray:
        return np.arange(self.ny) / self.ny

    def mesh2d(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")

    def mesh3d(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, self.z_levels, indexing="ij")

    @property
    def shape2d(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def shape3d(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def vshape(self) -> tuple[int, int, int, int]:
        return (2, self.nx, self.ny, self.nz)

    @functools.cached_property
    def plan(self):
        from cpesim.operators import SpectralPlan

        return SpectralPlan.for_grid(self)

    @functools.cached_property
    def vertical(self):
        from cpesim.operators import VerticalOps

        return VerticalOps(self.nz)


@dataclasses.dataclass
class PrimState:
    """Prognostic fields: the z-independent surface variable and horizontal velocity.

    ``surface_var`` is xi (gravity regime) or sigma = rho**0.5 (vacuum regime).
    The stepper is the only writer; readers inspect between steps.
    """

    surface_var: np.ndarray
    v: np.ndarray
    time: float = 0.0

    def copy(self) -> "PrimState":
        return PrimState(self.surface_var.copy(), self.v.copy(), self.time)

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return self.v.shape[1:]


@dataclasses.dataclass(frozen=True)
class DerivedFields:
    rho: np.ndarray
    pressure: np.ndarray
    mass_flux_w: np.ndarray
    w: np.ndarray  # NaN where the density does not exceed the floor


@dataclasses.dataclass(frozen=True)
class DiagnosticsRecord:
    time: float
    mass: float
    energy: float
    dissipation_rate: float
    min_density: float
    surface_l2: float
    v_l2: float
    picard_iters: int

    FIELDS = (
        "time",
        "mass",
        "energy",
        "dissipation_rate",
        "min_density",
        "surface_l2",
        "v_l2",
        "picard_iters",
    )


def _check_shape(name: str, arr: np.ndarray, shape: tuple) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def neumann_project(v: np.ndarray, grid: Grid) -> np.ndarray:
    """Reset boundary levels so the one-sided second-order dz vanishes at z = 0, 1."""
    vert = grid.vertical
    return vert.extend(vert.restrict(v))


def make_state(
    grid: Grid,
    init_surface,
    init_v,
    params: SimParams,
    *,
    project: bool = True,
) -> PrimState:
    """Build a validated initial state at time 0."""
    surface = _check_shape("init_surface", init_surface, grid.shape2d).copy()
    v = _check_shape("init_v", init_v, grid.vshape).copy()
    if not (np.all(np.isfinite(surface)) and np.all(np.isfinite(v))):
        raise ParameterError("initial fields must be finite")

    if params.regime is Regime.GRAVITY_GAMMA2:
        rho_bottom = surface.min()  # density is increasing in z
        if rho_bottom < 0 or (params.rho_floor > 0 and rho_bottom < params.rho_floor):
            raise NegativeDensityError(
                f"xi0 + g z/2 has minimum {rho_bottom:.6g}, below floor {params.rho_floor:.6g}"
            )
        if rho_bottom <= 0:
            raise NegativeDensityError("gravity regime requires a strictly positive density")
    elif params.regime is Regime.VACUUM_NO_GRAVITY:
        if surface.min() < 0:
            raise ParameterError("sigma = rho**0.5 must be non-negative")
        if not np.mean(surface**2) > 0:
            raise ParameterError("initial total mass must be positive")
    else:
        raise ParameterError("use free_boundary.FbState for the free-boundary regime")

    if project:
        v = neumann_project(v, grid)
    return PrimState(surface, v, 0.0)


@dataclasses.dataclass(frozen=True)
class CompatibilityReport:
    """Residuals of the initial-data compatibility conditions."""

    v1_l2: float  # L2 norm of V1 (gravity) or h1 (vacuum)
    neumann_bottom: float
    neumann_top: float

    @property
    def boundary_ok(self) -> bool:
        return max(self.neumann_bottom, self.neumann_top) <= 1e-8


def check_compatibility(state: PrimState, params: SimParams, grid: Grid) -> CompatibilityReport:
    """Evaluate the time-derivative compatibility residual and the dz v boundary residual.

    Gravity regime returns ||V1||, with rho0 V1 equal to the momentum
    right-hand side at t = 0; the vacuum regime returns ||h1|| where the
    same right-hand side equals rho0**0.5 h1 (taken as 0 on the vacuum set).
    """
    from cpesim import operators as ops
    from cpesim.hydrostatics import reconstruct_density, recover_mass_flux

    v = state.v
    plan = grid.plan
    vert = grid.vertical
    rho = reconstruct_density(state, params, grid)
    rho_w = recover_mass_flux(state, params, grid)

    visc = (
        params.mu * ops.laplace_h(v, plan)
        + params.mu * ops.d_zz(v, grid, mode="even")
        + (params.mu + params.lam) * ops.grad_h(ops.div_h(v, plan), plan)
    )
    adv = np.einsum("j...,ij...->i...", v, ops.grad_h_vec(v, plan))
    dzv = ops.d_z(v, grid, mode="onesided")
    if params.regime is Regime.GRAVITY_GAMMA2:
        z = grid.z_levels
        xi = state.surface_var
        pressure_term = (2 * xi[..., None] + params.g * z) * ops.grad_h(xi, plan)[..., None]
    else:
        pressure_term = ops.grad_h(rho[..., 0] ** params.gamma, plan)[..., None]
    rhs = visc - pressure_term - rho * adv - rho_w * dzv

    if params.regime is Regime.GRAVITY_GAMMA2:
        weighted = rhs / rho
    else:
        sigma = np.sqrt(rho)
        with np.errstate(divide="ignore", invalid="ignore"):
            weighted = np.where(sigma > 0, rhs / np.where(sigma > 0, sigma, 1.0), 0.0)
    v1 = l2_norm(weighted, grid)

    bottom = np.abs(vert.onesided_bottom(v)).max()
    top = np.abs(vert.onesided_top(v)).max()
    return CompatibilityReport(float(v1), float(bottom), float(top))


def integrate(f: np.ndarray, grid: Grid) -> float:
    """Integral over the unit cell: horizontal mean times trapezoid in z."""
    f = np.asarray(f)
    if f.shape[-3:] == grid.shape3d:
        col = np.tensordot(f, grid.quad_weights, axes=([-1], [0]))
        return float(np.sum(col.mean(axis=(-2, -1))))
    if f.shape[-2:] == grid.shape2d:
        return float(np.sum(f.mean(axis=(-2, -1))))
    raise ShapeError(f"cannot integrate field of shape {f.shape}")


def l2_norm(f: np.ndarray, grid: Grid) -> float:
    return math.sqrt(max(integrate(np.abs(f) ** 2, grid), 0.0))
