"""Backward solve of the dual HJB equation.

For multipliers lambda the value function phi solves, backward from phi(T) = 0,

    d_t phi + sup_x { (r - x/2) d_Z phi + x/2 d_ZZ phi - H(x; V, eta_bar^2 V) }
            + kappa (theta - V) d_V phi + eta_bar xi V d_ZV phi
            + xi^2 V/2 d_VV phi = 0,

with phi(t-) = phi(t+) + sum_i lambda_i G_i at every maturity t_i. Each step
takes the supremum explicitly from phi at t_{k+1}, freezes the maximizing
sigma^2 and advances the resulting linear equation with the configured stepper
(the Douglas scheme unless ``HjbConfig.scheme`` says otherwise).
"""

import logging
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from lsv_calibrator.core.cost import conjugate_argmax, cost_value
from lsv_calibrator.core.errors import InputError, NumericalError
from lsv_calibrator.core.model import (
    CalibrationProblem,
    FieldTag,
    Grid2D,
    Grid3Field,
    OptionQuote,
    payoff_eval,
    validate_problem,
)
from lsv_calibrator.core.operators import PdeCoefficients, Stencils, TimeScheme, make_scheme

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HjbConfig:
    """Configuration for the HJB and pricing time steppers."""

    theta_adi: float = 0.5  # implicit weight of the Douglas stages
    keep_phi_path: bool = False  # store phi at every time node
    check_ellipticity: bool = True
    scheme: TimeScheme = TimeScheme.DOUGLAS
    # fully implicit Douglas steps after t = 0 and before every maturity
    rannacher_steps: int = 0

    def theta_schedule(
        self, n_steps: int, maturity_steps: Iterable[int] = ()
    ) -> np.ndarray:
        """Implicit weight of each step k (from t_k to t_k+1).

        The backward solves and the forward transport read the same schedule,
        which keeps the forward step the exact transpose of the backward one.
        """
        weights = np.full(n_steps, float(self.theta_adi))
        if self.rannacher_steps > 0:
            weights[: self.rannacher_steps] = 1.0
            for k in maturity_steps:
                weights[max(0, k - self.rannacher_steps) : k] = 1.0
        return weights


@dataclass(frozen=True)
class HjbSolution:
    """Value function at t = 0 and the maximizing sigma^2 field."""

    phi0: np.ndarray
    sigma2: Grid3Field
    phi_at_spot: float
    phi_path: Optional[Grid3Field] = None


def _as_lambdas(problem: CalibrationProblem, lambdas: Sequence[float]) -> np.ndarray:
    values = np.asarray(lambdas, dtype=float).reshape(-1)
    if values.size != problem.m:
        raise InputError(f"expected {problem.m} multipliers, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise InputError("multipliers must be finite")
    return values


def dual_value(
    problem: CalibrationProblem, lambdas: np.ndarray, phi_at_spot: float
) -> float:
    """J(lambda) = sum_i lambda_i c_i - phi(0, Z0, V0)."""
    return float(np.dot(lambdas, problem.prices) - phi_at_spot)


class HJBSolver:
    """Douglas-ADI solver for the dual HJB equation."""

    def __init__(self, config: Optional[HjbConfig] = None):
        """Initialize the solver with optional configuration.

        Args:
            config: Time-stepping configuration. If None, uses defaults.
        """
        self.config = config or HjbConfig()

    def apply_jump(
        self,
        phi: np.ndarray,
        quotes: Sequence[OptionQuote],
        lambdas: Sequence[float],
        grid: Grid2D,
    ) -> np.ndarray:
        """Add sum_i lambda_i G_i(Z) to every node of a slice.

        Args:
            phi: Slice at the maturity, shape (n_z, n_v).
            quotes: Quotes maturing at this time node.
            lambdas: Their multipliers, index-aligned with ``quotes``.
            grid: Space grid of the slice.

        Returns:
            New slice; the jump is constant in V.
        """
        if phi.shape != grid.shape:
            raise InputError(f"slice shape {phi.shape} does not match {grid.shape}")
        jump = np.zeros(grid.n_z)
        for quote, weight in zip(quotes, lambdas):
            if weight != 0.0:
                jump += weight * payoff_eval(quote, grid.z)
        return phi + jump[:, np.newaxis]

    def sup_step(
        self,
        phi_next: np.ndarray,
        problem: CalibrationProblem,
        stencils: Optional[Stencils] = None,
    ) -> Tuple[np.ndarray, PdeCoefficients]:
        """Maximize over sigma^2 at every node, given phi at t_{k+1}.

        Returns:
            The maximizing sigma^2 slice and the generator coefficients built
            from it.
        """
        stencils = stencils or Stencils.from_grid(problem.grid)
        d_z, d_zz = stencils.z_derivatives(phi_next)
        q = 0.5 * (d_zz - d_z)
        v = problem.grid.v_mesh
        floor = problem.heston.eta_bar**2 * v
        sigma2 = conjugate_argmax(q, v, floor, problem.cost)
        return sigma2, PdeCoefficients.from_variance(sigma2, problem.grid, problem.heston)

    def running_cost(self, sigma2: np.ndarray, problem: CalibrationProblem) -> np.ndarray:
        """H(sigma^2; V, eta_bar^2 V), zero on the degenerate V = 0 row."""
        v = problem.grid.v_mesh
        floor = problem.heston.eta_bar**2 * v
        live = v > floor
        with np.errstate(all="ignore"):
            cost = cost_value(sigma2, v, floor, problem.cost)
        return np.where(live, cost, 0.0)

    def douglas_step(
        self,
        phi_next: np.ndarray,
        coeffs: PdeCoefficients,
        dt: float,
        grid: Grid2D,
        source: Optional[np.ndarray] = None,
        stencils: Optional[Stencils] = None,
        theta: Optional[float] = None,
    ) -> np.ndarray:
        """One backward step of d_t phi + L phi + source = 0.

        ``theta`` overrides the configured Douglas weight for this step.

        Raises:
            NumericalError: On an ellipticity breach or a singular line system.
        """
        if self.config.check_ellipticity:
            bad = coeffs.ellipticity_violations()
            if bad:
                raise NumericalError(
                    f"ellipticity violated at {len(bad)} nodes, first {bad[0]}"
                )
        weight = self.config.theta_adi if theta is None else theta
        scheme = make_scheme(self.config.scheme, grid, coeffs, dt, weight, stencils)
        return scheme.step(phi_next, source)

    def solve_hjb(
        self, problem: CalibrationProblem, lambdas: Sequence[float]
    ) -> HjbSolution:
        """Solve the HJB equation backward from phi(T) = 0.

        Args:
            problem: Validated calibration problem.
            lambdas: One multiplier per quote.

        Returns:
            phi(0, ., .), the sigma^2 field and phi(0, Z0, V0).

        Raises:
            InputError: Invalid problem or multipliers.
            NumericalError: Propagated from the time stepper.
        """
        validate_problem(problem, allow_empty=True).raise_if_invalid()
        values = _as_lambdas(problem, lambdas)
        grid, tgrid = problem.grid, problem.tgrid
        stencils = Stencils.from_grid(grid)
        n = tgrid.n_steps
        sigma2 = np.empty((n, grid.n_z, grid.n_v))
        path = np.empty((n + 1, grid.n_z, grid.n_v)) if self.config.keep_phi_path else None

        weights = self.config.theta_schedule(n, problem.quotes_by_step)
        started = time.perf_counter()
        phi = np.zeros(grid.shape)
        if path is not None:
            path[n] = phi
        for k in range(n - 1, -1, -1):
            maturing = problem.quotes_by_step.get(k + 1)
            if maturing:
                phi = self.apply_jump(
                    phi,
                    [problem.quotes[i] for i in maturing],
                    values[maturing],
                    grid,
                )
            sigma2[k], coeffs = self.sup_step(phi, problem, stencils)
            source = -self.running_cost(sigma2[k], problem)
            phi = self.douglas_step(
                phi, coeffs, tgrid.dt, grid, source, stencils, theta=weights[k]
            )
            if not np.all(np.isfinite(phi)):
                raise NumericalError(f"non-finite value function at step {k}")
            if path is not None:
                path[k] = phi

        i0, j0 = grid.spot_index
        logger.debug(
            "HJB solve: %d steps in %.3fs, phi(0,Z0,V0)=%.10g",
            n,
            time.perf_counter() - started,
            phi[i0, j0],
        )
        return HjbSolution(
            phi0=phi,
            sigma2=Grid3Field(values=sigma2, tag=FieldTag.SIGMA2, grid=grid, tgrid=tgrid),
            phi_at_spot=float(phi[i0, j0]),
            phi_path=(
                Grid3Field(values=path, tag=FieldTag.PHI, grid=grid, tgrid=tgrid)
                if path is not None
                else None
            ),
        )

    def dual_objective(
        self, problem: CalibrationProblem, lambdas: Sequence[float]
    ) -> float:
        """J(lambda) = sum_i lambda_i c_i - phi(0, Z0, V0)."""
        values = _as_lambdas(problem, lambdas)
        solution = self.solve_hjb(problem, values)
        return dual_value(problem, values, solution.phi_at_spot)
