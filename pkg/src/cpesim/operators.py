"""Horizontal Fourier and vertical finite-difference operators.

Horizontal derivatives are Fourier collocation on the periodic unit square
(first derivatives drop the Nyquist mode, the Laplacian keeps it).  Vertical
operators act on the last axis with uniform spacing on ``[0, 1]``; averages
and cumulative integrals share the trapezoid weights so that
``vint(vfluct(f))`` vanishes at ``z = 1`` to roundoff.

Array layout: scalar fields are ``(nx, ny[, nz])``; vector fields carry a
leading component axis ``(2, nx, ny[, nz])``; ``grad_h_vec`` returns
``(2, 2, nx, ny, nz)`` with ``[i, j] = d_j v_i``.
"""

from __future__ import annotations

import dataclasses
import functools
import os

import numpy as np
import scipy.fft as sfft
from scipy.integrate import cumulative_trapezoid

from cpesim.core import ParameterError, ShapeError


def fft_workers() -> int:
    try:
        return max(1, int(os.environ.get("CPESIM_THREADS", "1")))
    except ValueError:
        return 1


@dataclasses.dataclass(frozen=True, eq=False)
class SpectralPlan:
    """Wavenumber tables for real 2D transforms on the unit torus.

    ``kx``/``ky`` are angular wavenumbers (integer multiples of 2*pi) for the
    ``rfftn`` layout (``ky`` is the halved axis).  ``kx_d``/``ky_d`` zero the
    Nyquist mode for odd-order derivatives.  ``dealias_mask`` keeps
    ``|m| <= n/3`` in each direction.
    """

    nx: int
    ny: int
    kx: np.ndarray
    ky: np.ndarray
    kx_d: np.ndarray
    ky_d: np.ndarray
    dealias_mask: np.ndarray

    @classmethod
    def for_grid(cls, grid) -> "SpectralPlan":
        return cls.build(grid.nx, grid.ny)

    @classmethod
    @functools.lru_cache(maxsize=32)
    def build(cls, nx: int, ny: int) -> "SpectralPlan":
        mx = sfft.fftfreq(nx, 1.0 / nx)
        my = sfft.rfftfreq(ny, 1.0 / ny)
        kx = 2 * np.pi * mx
        ky = 2 * np.pi * my
        kx_d = np.where(np.abs(mx) == nx // 2, 0.0, kx)
        ky_d = np.where(np.abs(my) == ny // 2, 0.0, ky)
        mask = (np.abs(mx)[:, None] <= nx / 3.0) & (np.abs(my)[None, :] <= ny / 3.0)
        for a in (kx, ky, kx_d, ky_d, mask):
            a.setflags(write=False)
        return cls(nx, ny, kx, ky, kx_d, ky_d, mask)

    @property
    def spectral_shape(self) -> tuple[int, int]:
        return (self.nx, self.ny // 2 + 1)

    def haxes(self, f: np.ndarray) -> tuple[int, int]:
        shape = f.shape
        for a in range(0, max(len(shape) - 1, 0)):
            if shape[a : a + 2] == (self.nx, self.ny):
                return (a, a + 1)
        raise ShapeError(f"field of shape {shape} has no ({self.nx}, {self.ny}) horizontal axes")

    def _bcast(self, k: np.ndarray, axis: int, ndim: int, first: int) -> np.ndarray:
        shape = [1] * ndim
        shape[first + axis] = k.size
        return k.reshape(shape)

    def kvec(self, fhat: np.ndarray, first: int, *, deriv: bool = True):
        kx = self.kx_d if deriv else self.kx
        ky = self.ky_d if deriv else self.ky
        return (
            self._bcast(kx, 0, fhat.ndim, first),
            self._bcast(ky, 1, fhat.ndim, first),
        )

    def forward(self, f: np.ndarray):
        axes = self.haxes(f)
        return sfft.rfftn(f, axes=axes, workers=fft_workers()), axes[0]

    def inverse(self, fhat: np.ndarray, first: int) -> np.ndarray:
        return sfft.irfftn(
            fhat, s=(self.nx, self.ny), axes=(first, first + 1), workers=fft_workers()
        )

    def mask_like(self, fhat: np.ndarray, first: int) -> np.ndarray:
        shape = [1] * fhat.ndim
        shape[first] = self.nx
        shape[first + 1] = self.ny // 2 + 1
        return self.dealias_mask.reshape(shape)


def grad_h(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """Horizontal gradient of a scalar field; result has a leading axis of size 2."""
    fhat, first = plan.forward(f)
    kx, ky = plan.kvec(fhat, first)
    return np.stack([plan.inverse(1j * kx * fhat, first), plan.inverse(1j * ky * fhat, first)])


def div_h(u: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """Horizontal divergence of a two-component field ``u[0], u[1]``."""
    if u.shape[0] != 2:
        raise ShapeError(f"vector field must have a leading axis of size 2, got {u.shape}")
    uhat, first = plan.forward(u)
    kx, ky = plan.kvec(uhat[0], first - 1)
    return plan.inverse(1j * (kx * uhat[0] + ky * uhat[1]), first - 1)


def laplace_h(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    fhat, first = plan.forward(f)
    kx, ky = plan.kvec(fhat, first, deriv=False)
    return plan.inverse(-(kx**2 + ky**2) * fhat, first)


def grad_h_vec(u: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """Horizontal gradient of each component: ``out[i, j] = d_j u_i``."""
    uhat, first = plan.forward(u)
    kx, ky = plan.kvec(uhat, first)
    return np.stack([plan.inverse(1j * kx * uhat, first), plan.inverse(1j * ky * uhat, first)], axis=1)


def dealias(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """Apply the 2/3-rule spectral truncation."""
    fhat, first = plan.forward(f)
    return plan.inverse(fhat * plan.mask_like(fhat, first), first)


def horizontal_modes_energy(f: np.ndarray, plan: SpectralPlan) -> np.ndarray:
    """|fhat|^2 per rfft mode, weighted so that the sum equals the grid mean of f**2."""
    fhat, first = plan.forward(f)
    n = plan.nx * plan.ny
    wy = np.full(plan.ny // 2 + 1, 2.0)
    wy[0] = 1.0
    if plan.ny % 2 == 0:
        wy[-1] = 1.0
    shape = [1] * fhat.ndim
    shape[first + 1] = wy.size
    return np.abs(fhat) ** 2 * wy.reshape(shape) / n**2


# ---------------------------------------------------------------- vertical


class VerticalOps:
    """Matrices of the vertical discretization on ``nz`` uniform levels.

    ``E`` extends interior values to all levels so that the one-sided
    second-order derivative vanishes at both ends; ``K`` is the stiffness
    ``sum_mid (dv)^2 / hz`` and ``Q`` the trapezoid weights.  The reduced
    mass ``E^T Q E`` and stiffness ``E^T K E`` define the Neumann problem.
    """

    def __init__(self, nz: int):
        if nz < 3:
            raise ParameterError(f"nz must be >= 3, got {nz}")
        self.nz = nz
        self.hz = h = 1.0 / (nz - 1)
        self.z = np.linspace(0.0, 1.0, nz)
        q = np.full(nz, h)
        q[0] = q[-1] = h / 2
        self.q = q

        diff = np.zeros((nz - 1, nz))
        idx = np.arange(nz - 1)
        diff[idx, idx] = -1.0 / h
        diff[idx, idx + 1] = 1.0 / h
        self.diff = diff
        self.K = diff.T @ diff * h

        cons = np.zeros((2, nz))
        cons[0, :3] = [-3.0, 4.0, -1.0]
        cons[1, -3:] = [1.0, -4.0, 3.0]
        bnd = [0, nz - 1]
        inner = list(range(1, nz - 1))
        E = np.zeros((nz, nz - 2))
        E[inner, np.arange(nz - 2)] = 1.0
        E[bnd, :] = -np.linalg.solve(cons[:, bnd], cons[:, inner])
        self.E = E
        self.mass = E.T @ (q[:, None] * E)
        self.stiff = E.T @ self.K @ E

        D = np.zeros((nz, nz))
        D[idx[1:], idx[1:] - 1] = -0.5 / h
        D[idx[1:], idx[1:] + 1] = 0.5 / h
        D[0, :2] = [-1.0 / h, 1.0 / h]
        D[-1, -2:] = [-1.0 / h, 1.0 / h]
        self.D_sbp = D

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v[..., 1:-1]

    def extend(self, x: np.ndarray) -> np.ndarray:
        return x @ self.E.T

    def onesided_bottom(self, v: np.ndarray) -> np.ndarray:
        return (-3 * v[..., 0] + 4 * v[..., 1] - v[..., 2]) / (2 * self.hz)

    def onesided_top(self, v: np.ndarray) -> np.ndarray:
        return (3 * v[..., -1] - 4 * v[..., -2] + v[..., -3]) / (2 * self.hz)

    def stiffness_energy(self, v: np.ndarray) -> np.ndarray:
        """Column values of ``sum_mid hz * ((v[k+1]-v[k]) / hz)**2``."""
        dv = np.diff(v, axis=-1) / self.hz
        return np.sum(dv**2, axis=-1) * self.hz


def _check_nz(f: np.ndarray) -> int:
    nz = f.shape[-1]
    if nz < 3:
        raise ParameterError(f"vertical operators need nz >= 3, got {nz}")
    return nz


def d_z(f: np.ndarray, grid=None, *, mode: str = "onesided") -> np.ndarray:
    """Vertical derivative: centered interior, boundary closure chosen by ``mode``.

    ``even``: ghost levels mirror the interior (encodes dz f = 0; boundary value 0).
    ``onesided``: second-order one-sided differences.
    ``sbp``: first-order one-sided closure forming a summation-by-parts pair
    with the trapezoid weights.
    """
    nz = _check_nz(f)
    h = 1.0 / (nz - 1)
    out = np.empty_like(f, dtype=np.float64)
    out[..., 1:-1] = (f[..., 2:] - f[..., :-2]) / (2 * h)
    if mode == "even":
        out[..., 0] = 0.0
        out[..., -1] = 0.0
    elif mode == "onesided":
        out[..., 0] = (-3 * f[..., 0] + 4 * f[..., 1] - f[..., 2]) / (2 * h)
        out[..., -1] = (3 * f[..., -1] - 4 * f[..., -2] + f[..., -3]) / (2 * h)
    elif mode == "sbp":
        out[..., 0] = (f[..., 1] - f[..., 0]) / h
        out[..., -1] = (f[..., -1] - f[..., -2]) / h
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def d_zz(f: np.ndarray, grid=None, *, mode: str = "even") -> np.ndarray:
    nz = _check_nz(f)
    h = 1.0 / (nz - 1)
    out = np.empty_like(f, dtype=np.float64)
    out[..., 1:-1] = (f[..., 2:] - 2 * f[..., 1:-1] + f[..., :-2]) / h**2
    if mode == "even":
        out[..., 0] = 2 * (f[..., 1] - f[..., 0]) / h**2
        out[..., -1] = 2 * (f[..., -2] - f[..., -1]) / h**2
    elif mode == "onesided":
        if nz >= 4:
            out[..., 0] = (2 * f[..., 0] - 5 * f[..., 1] + 4 * f[..., 2] - f[..., 3]) / h**2
            out[..., -1] = (2 * f[..., -1] - 5 * f[..., -2] + 4 * f[..., -3] - f[..., -4]) / h**2
        else:
            out[..., 0] = out[..., 1]
            out[..., -1] = out[..., -2]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out


def trapezoid_weights(nz: int) -> np.ndarray:
    w = np.full(nz, 1.0 / (nz - 1))
    w[0] = w[-1] = 0.5 / (nz - 1)
    return w


def vavg(f: np.ndarray) -> np.ndarray:
    """Vertical average (trapezoid rule on the last axis)."""
    return f @ trapezoid_weights(f.shape[-1])


def vfluct(f: np.ndarray) -> np.ndarray:
    return f - vavg(f)[..., None]


def vint(f: np.ndarray) -> np.ndarray:
    """Cumulative trapezoid integral from z = 0 along the last axis."""
    nz = f.shape[-1]
    return cumulative_trapezoid(f, dx=1.0 / (nz - 1), axis=-1, initial=0.0)
