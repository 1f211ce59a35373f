"""Finite-difference operators and the Douglas ADI step on the (Z, V) grid.

The generator of the LSV dynamics with frozen sigma^2 splits as

    A0 = eta_bar xi V d_ZV                           (mixed, explicit)
    A1 = (r - sigma^2/2) d_Z + sigma^2/2 d_ZZ          (Z-lines, implicit)
    A2 = kappa (theta - V) d_V + xi^2 V/2 d_VV        (V-lines, implicit)

Stencils are centered in the interior. At the edges first derivatives are
one-sided and second derivatives vanish (linearity boundary condition), so
every operator annihilates constants. Arrays on the grid have shape (n_z, n_v).

Two time steppers share one interface (``step`` backward, ``adjoint_step``
forward). ``DouglasScheme`` is the second-order ADI step with centered stencils.
``MonotoneScheme`` trades accuracy for a nonnegative step matrix: upwinded
drifts where the cell Peclet number exceeds one, a positive-type cross stencil
and fully implicit line solves. Its transpose maps densities to densities.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np

from lsv_calibrator.core.errors import NumericalError
from lsv_calibrator.core.model import Grid2D, HestonParams

logger = logging.getLogger(__name__)

PIVOT_FLOOR = 1e-13


class TimeScheme(str, Enum):
    """Time stepper shared by the HJB solve and both pricing routes."""

    DOUGLAS = "douglas"
    MONOTONE = "monotone"


@dataclass(frozen=True)
class Tridiagonal:
    """A batch of tridiagonal matrices acting along the last axis.

    ``lower[..., k]`` multiplies x[k-1] and ``upper[..., k]`` multiplies x[k+1]
    in row k; ``lower[..., 0]`` and ``upper[..., -1]`` are ignored.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = self.diag * x
        y[..., 1:] += self.lower[..., 1:] * x[..., :-1]
        y[..., :-1] += self.upper[..., :-1] * x[..., 1:]
        return y

    def transpose(self) -> "Tridiagonal":
        lower = np.zeros(np.broadcast(self.lower, self.upper).shape)
        upper = np.zeros_like(lower)
        lower[..., 1:] = self.upper[..., :-1]
        upper[..., :-1] = self.lower[..., 1:]
        return Tridiagonal(lower=lower, diag=self.diag, upper=upper)

    def shifted(self, alpha: float) -> "Tridiagonal":
        """I - alpha * self."""
        return Tridiagonal(
            lower=-alpha * self.lower,
            diag=1.0 - alpha * self.diag,
            upper=-alpha * self.upper,
        )

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Thomas algorithm, vectorized over every leading axis of ``rhs``.

        Raises:
            NumericalError: On a vanishing pivot, naming the line and node.
        """
        a = np.broadcast_to(self.lower, rhs.shape)
        b = np.broadcast_to(self.diag, rhs.shape)
        c = np.broadcast_to(self.upper, rhs.shape)
        n = rhs.shape[-1]
        c_prime = np.empty(rhs.shape)
        x = np.empty(rhs.shape)

        denom = b[..., 0]
        _check_pivot(denom, 0)
        c_prime[..., 0] = c[..., 0] / denom
        x[..., 0] = rhs[..., 0] / denom
        for k in range(1, n):
            denom = b[..., k] - a[..., k] * c_prime[..., k - 1]
            _check_pivot(denom, k)
            c_prime[..., k] = c[..., k] / denom
            x[..., k] = (rhs[..., k] - a[..., k] * x[..., k - 1]) / denom

        for k in range(n - 2, -1, -1):
            x[..., k] -= c_prime[..., k] * x[..., k + 1]
        return x


def _check_pivot(denom: np.ndarray, node: int) -> None:
    bad = ~(np.abs(denom) > PIVOT_FLOOR)
    if np.any(bad):
        line = int(np.flatnonzero(np.atleast_1d(bad))[0])
        raise NumericalError(
            f"singular tridiagonal system: line {line}, node {node}, "
            f"pivot {np.atleast_1d(denom)[line]:.3e}"
        )


def first_derivative(n: int, h: float) -> Tridiagonal:
    """Centered d/dx in the interior, one-sided at both ends."""
    lower = np.full(n, -0.5 / h)
    diag = np.zeros(n)
    upper = np.full(n, 0.5 / h)
    lower[0], diag[0], upper[0] = 0.0, -1.0 / h, 1.0 / h
    lower[-1], diag[-1], upper[-1] = -1.0 / h, 1.0 / h, 0.0
    return Tridiagonal(lower=lower, diag=diag, upper=upper)


def second_derivative(n: int, h: float) -> Tridiagonal:
    """Centered d2/dx2 in the interior, zero at both ends."""
    inv = 1.0 / (h * h)
    lower = np.full(n, inv)
    diag = np.full(n, -2.0 * inv)
    upper = np.full(n, inv)
    lower[[0, -1]] = diag[[0, -1]] = upper[[0, -1]] = 0.0
    return Tridiagonal(lower=lower, diag=diag, upper=upper)


@dataclass(frozen=True)
class Stencils:
    """First and second difference operators along Z and V for one grid."""

    dz: Tridiagonal
    dzz: Tridiagonal
    dv: Tridiagonal
    dvv: Tridiagonal

    @classmethod
    def from_grid(cls, grid: Grid2D) -> "Stencils":
        return cls(
            dz=first_derivative(grid.n_z, grid.dz),
            dzz=second_derivative(grid.n_z, grid.dz),
            dv=first_derivative(grid.n_v, grid.dv),
            dvv=second_derivative(grid.n_v, grid.dv),
        )

    def z_derivatives(self, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(d_Z phi, d_ZZ phi) on the grid."""
        lines = phi.T
        return self.dz.apply(lines).T, self.dzz.apply(lines).T

    def cross(self, phi: np.ndarray) -> np.ndarray:
        """d_ZV phi as d_Z applied to d_V phi (4-point stencil inside)."""
        return self.dz.apply(self.dv.apply(phi).T).T

    def cross_transpose(self, p: np.ndarray) -> np.ndarray:
        return self.dv.transpose().apply(self.dz.transpose().apply(p.T).T)


@dataclass(frozen=True)
class PdeCoefficients:
    """Drift and diffusion of the generator at every node."""

    drift_z: np.ndarray  # r - sigma^2/2
    drift_v: np.ndarray  # kappa (theta - V)
    diff_z: np.ndarray  # sigma^2 / 2
    diff_v: np.ndarray  # xi^2 V / 2
    mixed: np.ndarray  # eta_bar xi V

    @classmethod
    def from_variance(
        cls, sigma2: np.ndarray, grid: Grid2D, heston: HestonParams
    ) -> "PdeCoefficients":
        v = grid.v_mesh
        return cls(
            drift_z=heston.r - 0.5 * sigma2,
            drift_v=heston.kappa * (heston.theta - v),
            diff_z=0.5 * sigma2,
            diff_v=0.5 * heston.xi**2 * v,
            mixed=heston.eta_bar * heston.xi * v,
        )

    def ellipticity_violations(self, rel_tol: float = 1e-10) -> List[Tuple[int, int]]:
        """Nodes where mixed^2 > 4 diff_z diff_v, i.e. sigma^2 < eta_bar^2 V."""
        bound = 4.0 * self.diff_z * self.diff_v
        bad = self.mixed**2 > bound * (1.0 + rel_tol) + 1e-300
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]


class DouglasScheme:
    """One Douglas ADI step for frozen coefficients, and its exact transpose.

    Backward in time, from phi at t_{k+1} to phi at t_k:

        Y0 = phi + dt (A phi + f)
        (I - theta dt A1) Y1 = Y0 - theta dt A1 phi
        (I - theta dt A2) Y2 = Y1 - theta dt A2 phi

    and phi_k = Y2. ``adjoint_step`` applies the transpose of the same linear
    map (with f = 0), which transports a density forward by one step.
    """

    def __init__(
        self,
        grid: Grid2D,
        coeffs: PdeCoefficients,
        dt: float,
        theta: float = 0.5,
        stencils: Optional[Stencils] = None,
    ):
        """Assemble the split operators.

        Args:
            grid: Space grid.
            coeffs: Node coefficients, frozen over the step.
            dt: Step size.
            theta: Implicit weight of the Douglas stages.
            stencils: Reusable difference operators for ``grid``.
        """
        self.grid = grid
        self.dt = dt
        self.theta = theta
        self.stencils = stencils or Stencils.from_grid(grid)
        self.mixed = coeffs.mixed
        st = self.stencils
        # A1 lines run along Z for each V index: arrays are (n_v, n_z)
        self.a1 = Tridiagonal(
            lower=coeffs.drift_z.T * st.dz.lower + coeffs.diff_z.T * st.dzz.lower,
            diag=coeffs.drift_z.T * st.dz.diag + coeffs.diff_z.T * st.dzz.diag,
            upper=coeffs.drift_z.T * st.dz.upper + coeffs.diff_z.T * st.dzz.upper,
        )
        # A2 lines run along V for each Z index: arrays are (n_z, n_v)
        self.a2 = Tridiagonal(
            lower=coeffs.drift_v * st.dv.lower + coeffs.diff_v * st.dvv.lower,
            diag=coeffs.drift_v * st.dv.diag + coeffs.diff_v * st.dvv.diag,
            upper=coeffs.drift_v * st.dv.upper + coeffs.diff_v * st.dvv.upper,
        )
        weight = theta * dt
        self.s1 = self.a1.shifted(weight)
        self.s2 = self.a2.shifted(weight)

    def explicit_terms(
        self, phi: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(A0 phi, A1 phi, A2 phi)."""
        a0 = self.mixed * self.stencils.cross(phi)
        a1 = self.a1.apply(phi.T).T
        a2 = self.a2.apply(phi)
        return a0, a1, a2

    def step(self, phi: np.ndarray, source: Optional[np.ndarray] = None) -> np.ndarray:
        """Advance ``phi`` one step backward in time."""
        a0, a1, a2 = self.explicit_terms(phi)
        weight = self.theta * self.dt
        y0 = phi + self.dt * (a0 + a1 + a2)
        if source is not None:
            y0 = y0 + self.dt * source
        y1 = self.s1.solve((y0 - weight * a1).T).T
        return self.s2.solve(y1 - weight * a2)

    def adjoint_step(self, p: np.ndarray) -> np.ndarray:
        """Apply the transpose of the (source-free) step to ``p``."""
        weight = self.theta * self.dt
        a1_t = self.a1.transpose()
        a2_t = self.a2.transpose()
        u = self.s2.transpose().solve(p)
        w = self.s1.transpose().solve(u.T).T
        a0_w = self.stencils.cross_transpose(self.mixed * w)
        a1_w = a1_t.apply(w.T).T
        a2_w = a2_t.apply(w)
        a2_u = a2_t.apply(u)
        return w + self.dt * (a0_w + a1_w + a2_w) - weight * a1_w - weight * a2_u


def monotone_line(diffusion: np.ndarray, drift: np.ndarray, h: float) -> Tridiagonal:
    """a d2/dx2 + b d/dx with nonnegative off-diagonals, along the last axis.

    Centered where the cell Peclet number |b| h / (2a) is at most one, upwind
    elsewhere. At the ends the second derivative vanishes and the drift keeps
    only its inward-pointing part, so every row sums to zero.
    """
    a = np.maximum(diffusion, 0.0) / (h * h)
    b = np.asarray(drift, dtype=float)
    centered_lower = a - 0.5 * b / h
    centered_upper = a + 0.5 * b / h
    upwind = (centered_lower < 0.0) | (centered_upper < 0.0)
    lower = np.where(upwind, a + np.maximum(-b, 0.0) / h, centered_lower)
    upper = np.where(upwind, a + np.maximum(b, 0.0) / h, centered_upper)
    lower[..., 0] = 0.0
    upper[..., 0] = np.maximum(b[..., 0], 0.0) / h
    lower[..., -1] = np.maximum(-b[..., -1], 0.0) / h
    upper[..., -1] = 0.0
    return Tridiagonal(lower=lower, diag=-(lower + upper), upper=upper)


@dataclass(frozen=True)
class PositiveCross:
    """Explicit part of a positive-type stencil for mixed * d_ZV.

    The stencil couples (i, j) with (i + reach, j + sign) and
    (i - reach, j - sign), where sign is the sign of the correlation. It
    produces the terms reach dZ / (2 dV) d_ZZ and dV / (2 reach dZ) d_VV with
    the mixed coefficient, which are returned as ``z_correction`` and
    ``v_correction`` and subtracted from the line diffusions. ``reach`` is the
    smallest one that leaves the V diffusion nonnegative; where the Z diffusion
    cannot absorb its share the mixed coefficient is damped.
    """

    weight: np.ndarray
    reach: int
    sign: int
    z_correction: np.ndarray
    v_correction: np.ndarray

    @classmethod
    def from_coefficients(cls, coeffs: PdeCoefficients, grid: Grid2D) -> "PositiveCross":
        n_z, n_v = grid.shape
        h, k = grid.dz, grid.dv
        mixed = np.abs(coeffs.mixed)
        sign = 1 if float(np.sum(coeffs.mixed)) >= 0.0 else -1
        zeros = np.zeros(grid.shape)

        carried = (mixed > 0.0) & (coeffs.diff_v > 0.0)
        if not np.any(carried):
            return cls(zeros, 1, sign, zeros, zeros)
        needed = float(np.max(mixed[carried] * k / (2.0 * coeffs.diff_v[carried] * h)))
        reach = max(1, math.ceil(needed - 1e-9))
        if 2 * reach >= n_z or n_v < 3:
            logger.warning(
                "Grid too coarse for a monotone cross stencil of reach %d; "
                "correlation dropped",
                reach,
            )
            return cls(zeros, reach, sign, zeros, zeros)

        inner = np.zeros(grid.shape, dtype=bool)
        inner[reach : n_z - reach, 1 : n_v - 1] = True
        live = inner & carried
        with np.errstate(divide="ignore", invalid="ignore"):
            damping = np.minimum.reduce(
                [
                    np.ones(grid.shape),
                    2.0 * k * coeffs.diff_z / (mixed * reach * h),
                    2.0 * reach * h * coeffs.diff_v / (mixed * k),
                ]
            )
        effective = np.where(live, mixed * np.clip(damping, 0.0, 1.0), 0.0)
        damped = int(np.count_nonzero(live & (damping < 1.0)))
        if damped:
            logger.debug("Monotone cross stencil damped at %d nodes", damped)
        return cls(
            weight=effective / (2.0 * reach * h * k),
            reach=reach,
            sign=sign,
            z_correction=effective * reach * h / (2.0 * k),
            v_correction=effective * k / (2.0 * reach * h),
        )

    def _slices(self, shape: Tuple[int, int]):
        n_z, n_v = shape
        m = self.reach
        inner = (slice(m, n_z - m), slice(1, n_v - 1))
        if self.sign > 0:
            ahead = (slice(2 * m, n_z), slice(2, n_v))
            behind = (slice(0, n_z - 2 * m), slice(0, n_v - 2))
        else:
            ahead = (slice(2 * m, n_z), slice(0, n_v - 2))
            behind = (slice(0, n_z - 2 * m), slice(2, n_v))
        return inner, ahead, behind

    def apply(self, phi: np.ndarray) -> np.ndarray:
        out = -2.0 * self.weight * phi
        if 2 * self.reach < phi.shape[0]:
            inner, ahead, behind = self._slices(phi.shape)
            out[inner] += self.weight[inner] * (phi[ahead] + phi[behind])
        return out

    def apply_transpose(self, p: np.ndarray) -> np.ndarray:
        q = self.weight * p
        out = -2.0 * q
        if 2 * self.reach < p.shape[0]:
            inner, ahead, behind = self._slices(p.shape)
            out[ahead] += q[inner]
            out[behind] += q[inner]
        return out


class MonotoneScheme:
    """Fully implicit split step whose matrix is entrywise nonnegative.

    Backward in time:

        Y0 = (I + dt/n C)^n phi + dt f
        (I - dt A1') Y1 = Y0
        (I - dt A2') phi_k = Y1

    C is the positive-type cross stencil, taken in n substeps so that its
    diagonal stays nonnegative, and A1', A2' are ``monotone_line`` operators.
    Every factor preserves constants, so ``adjoint_step`` conserves mass and
    keeps densities nonnegative. First order in time.
    """

    theta = 1.0

    def __init__(
        self,
        grid: Grid2D,
        coeffs: PdeCoefficients,
        dt: float,
        stencils: Optional[Stencils] = None,
    ):
        self.grid = grid
        self.dt = dt
        self.cross = PositiveCross.from_coefficients(coeffs, grid)
        self.a1 = monotone_line(
            (coeffs.diff_z - self.cross.z_correction).T, coeffs.drift_z.T, grid.dz
        )
        self.a2 = monotone_line(
            coeffs.diff_v - self.cross.v_correction, coeffs.drift_v, grid.dv
        )
        self.s1 = self.a1.shifted(dt)
        self.s2 = self.a2.shifted(dt)
        self.substeps = max(1, math.ceil(2.0 * dt * float(np.max(self.cross.weight))))

    def step(self, phi: np.ndarray, source: Optional[np.ndarray] = None) -> np.ndarray:
        sub_dt = self.dt / self.substeps
        y = phi
        for _ in range(self.substeps):
            y = y + sub_dt * self.cross.apply(y)
        if source is not None:
            y = y + self.dt * source
        y1 = self.s1.solve(y.T).T
        return self.s2.solve(y1)

    def adjoint_step(self, p: np.ndarray) -> np.ndarray:
        sub_dt = self.dt / self.substeps
        u = self.s2.transpose().solve(p)
        w = self.s1.transpose().solve(u.T).T
        for _ in range(self.substeps):
            w = w + sub_dt * self.cross.apply_transpose(w)
        return w


def make_scheme(
    kind: TimeScheme,
    grid: Grid2D,
    coeffs: PdeCoefficients,
    dt: float,
    theta: float = 0.5,
    stencils: Optional[Stencils] = None,
) -> Union[DouglasScheme, MonotoneScheme]:
    """The time stepper of the given kind; ``theta`` only affects Douglas."""
    if kind is TimeScheme.MONOTONE:
        return MonotoneScheme(grid, coeffs, dt, stencils)
    return DouglasScheme(grid, coeffs, dt, theta, stencils)
