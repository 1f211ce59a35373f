"""Model prices under a frozen sigma^2 field.

Two routes discretize the same generator:

* ``price_backward`` steps the pricing equation backward from G_i at t_i and
  reads the value at (Z0, V0);
* ``solve_fokker_planck`` transports the point mass at (Z0, V0) forward with
  the transpose of the same step, and ``prices_from_density`` integrates every
  payoff against the density slice at its maturity.

Because the forward step is the exact transpose of the backward one, the two
routes agree to round-off, and a single forward solve prices every quote.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lsv_calibrator.core.cost import CostParams
from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.heston import QuoteSetSpec, call_equivalent_iv, quote_grid
from lsv_calibrator.core.hjb import HjbConfig
from lsv_calibrator.core.model import (
    CalibrationProblem,
    DomainSpec,
    FieldTag,
    Grid3Field,
    HestonParams,
    OptionQuote,
    SpotState,
    build_grids,
    payoff_eval,
    validate_problem,
)
from lsv_calibrator.core.operators import PdeCoefficients, Stencils, make_scheme

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PricerConfig:
    """Configuration for model pricing."""

    mass_tol: float = 1e-3  # allowed drift of the density mass over the horizon
    negative_tol: float = 1e-6  # allowed total negative mass per slice
    workers: int = 1  # threads for quote-level backward pricing


@dataclass(frozen=True)
class DensityPath:
    """Density at every time node plus its mass ledger."""

    density: Grid3Field
    masses: np.ndarray
    negative_masses: np.ndarray
    flags: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.flags


class ForwardPricer:
    """Prices claims under a calibrated (or reference) sigma^2 field."""

    def __init__(
        self,
        config: Optional[PricerConfig] = None,
        hjb_config: Optional[HjbConfig] = None,
    ):
        """Initialize the pricer.

        Args:
            config: Pricing configuration. If None, uses defaults.
            hjb_config: Supplies the time scheme and weights shared with the HJB
                solver.
        """
        self.config = config or PricerConfig()
        self.hjb_config = hjb_config or HjbConfig()

    def _check_field(self, problem: CalibrationProblem, sigma2: Grid3Field) -> None:
        if sigma2.tag is not FieldTag.SIGMA2:
            raise InputError(f"expected a sigma2 field, got {sigma2.tag.value}")
        if sigma2.values.shape[1:] != problem.grid.shape or (
            sigma2.tgrid.n_steps != problem.tgrid.n_steps
        ):
            raise InputError(
                f"sigma2 field {sigma2.values.shape} does not match the problem grids"
            )

    def _scheme(
        self,
        problem: CalibrationProblem,
        sigma2: Grid3Field,
        k: int,
        stencils: Stencils,
        weights: np.ndarray,
    ):
        coeffs = PdeCoefficients.from_variance(
            sigma2.values[k], problem.grid, problem.heston
        )
        return make_scheme(
            self.hjb_config.scheme,
            problem.grid,
            coeffs,
            problem.tgrid.dt,
            float(weights[k]),
            stencils,
        )

    def _weights(self, problem: CalibrationProblem) -> np.ndarray:
        return self.hjb_config.theta_schedule(
            problem.tgrid.n_steps, problem.quotes_by_step
        )

    def price_backward(
        self, problem: CalibrationProblem, sigma2: Grid3Field, quote: OptionQuote
    ) -> float:
        """E[G(Z_t)] by the pricing PDE, stepped from the maturity back to 0.

        Raises:
            InputError: Maturity off the grid or mismatched field.
        """
        self._check_field(problem, sigma2)
        k_maturity = problem.tgrid.step_index(quote.maturity)
        if k_maturity is None or k_maturity == 0:
            raise InputError(f"maturity {quote.maturity} not on time grid")
        stencils = Stencils.from_grid(problem.grid)
        value = np.repeat(
            payoff_eval(quote, problem.grid.z)[:, np.newaxis], problem.grid.n_v, axis=1
        )
        weights = self._weights(problem)
        for k in range(k_maturity - 1, -1, -1):
            value = self._scheme(problem, sigma2, k, stencils, weights).step(value)
        i0, j0 = problem.grid.spot_index
        return float(value[i0, j0])

    def price_backward_many(
        self,
        problem: CalibrationProblem,
        sigma2: Grid3Field,
        quotes: Sequence[OptionQuote],
        workers: Optional[int] = None,
    ) -> np.ndarray:
        """Backward prices for a quote list, in order, across a thread pool."""
        workers = workers or self.config.workers
        if workers <= 1 or len(quotes) <= 1:
            return np.array([self.price_backward(problem, sigma2, q) for q in quotes])
        with ThreadPoolExecutor(max_workers=workers) as pool:
            prices = list(
                pool.map(lambda q: self.price_backward(problem, sigma2, q), quotes)
            )
        return np.array(prices)

    def solve_fokker_planck(
        self, problem: CalibrationProblem, sigma2: Grid3Field
    ) -> DensityPath:
        """Transport the point mass at (Z0, V0) forward over the whole horizon.

        Negative mass and mass drift beyond tolerance are recorded in the
        ledger and logged; the solve continues.
        """
        self._check_field(problem, sigma2)
        grid, tgrid = problem.grid, problem.tgrid
        stencils = Stencils.from_grid(grid)
        n = tgrid.n_steps
        area = grid.cell_area

        started = time.perf_counter()
        mass = np.zeros((n + 1, grid.n_z, grid.n_v))
        mass[0][grid.spot_index] = 1.0
        weights = self._weights(problem)
        for k in range(n):
            scheme = self._scheme(problem, sigma2, k, stencils, weights)
            mass[k + 1] = scheme.adjoint_step(mass[k])

        totals = mass.sum(axis=(1, 2))
        negatives = np.minimum(mass, 0.0).sum(axis=(1, 2))
        flags: List[str] = []
        drift = float(np.max(np.abs(totals - 1.0)))
        if drift > self.config.mass_tol:
            flags.append(f"mass drift {drift:.3e} exceeds {self.config.mass_tol}")
        worst = float(negatives.min())
        if worst < -self.config.negative_tol:
            flags.append(f"negative mass {worst:.3e} below -{self.config.negative_tol}")
        for flag in flags:
            logger.warning("Fokker-Planck ledger: %s", flag)
        logger.debug(
            "Fokker-Planck solve: %d steps in %.3fs, final mass %.12f",
            n,
            time.perf_counter() - started,
            totals[-1],
        )
        density = Grid3Field(
            values=mass / area, tag=FieldTag.DENSITY, grid=grid, tgrid=tgrid
        )
        return DensityPath(
            density=density,
            masses=totals,
            negative_masses=negatives,
            flags=tuple(flags),
        )

    def prices_from_density(
        self, path: DensityPath, quotes: Sequence[OptionQuote]
    ) -> np.ndarray:
        """Integrate each payoff against the density slice at its maturity.

        Each node carries the weight dZ dV, which makes this the exact adjoint
        of the backward route.
        """
        density = path.density
        grid, tgrid = density.grid, density.tgrid
        prices = np.empty(len(quotes))
        for index, quote in enumerate(quotes):
            k = tgrid.step_index(quote.maturity)
            if k is None:
                raise InputError(f"maturity {quote.maturity} not on time grid")
            marginal = density.values[k].sum(axis=1) * grid.cell_area
            prices[index] = float(np.dot(marginal, payoff_eval(quote, grid.z)))
        return prices

    def generate_quotes(
        self,
        heston: HestonParams,
        spot: SpotState,
        spec: Optional[QuoteSetSpec] = None,
        domain: Optional[DomainSpec] = None,
    ) -> Tuple[Tuple[OptionQuote, ...], np.ndarray]:
        """Price the quote grid under a Heston row on the calibration grids.

        The row is the LSV model with sigma^2 = V, stepped with the same scheme
        the calibrator uses, so its quotes are attainable by the discrete model.

        Returns:
            Quotes ordered by maturity then strike, and their implied vols.

        Raises:
            InputError: Invalid quote grid, or a maturity off the time mesh.
            PricingError: A price without an implied vol.
        """
        spec = spec or QuoteSetSpec()
        grid, tgrid = build_grids(domain, spot)
        problem = CalibrationProblem(
            heston=heston,
            spot=spot,
            quotes=quote_grid(spec, heston.r),
            grid=grid,
            tgrid=tgrid,
            cost=CostParams(),
        )
        validate_problem(problem).raise_if_invalid()
        sigma2 = Grid3Field(
            values=np.broadcast_to(grid.v_mesh, (tgrid.n_steps,) + grid.shape),
            tag=FieldTag.SIGMA2,
            grid=grid,
            tgrid=tgrid,
        )
        path = self.solve_fokker_planck(problem, sigma2)
        prices = self.prices_from_density(path, problem.quotes)
        quotes = tuple(
            quote.with_price(float(price)) for quote, price in zip(problem.quotes, prices)
        )
        ivs = np.array([call_equivalent_iv(quote, spot.s0) for quote in quotes])
        logger.info(
            "Generated %d quotes on a %dx%d grid with %d steps",
            len(quotes),
            grid.n_z,
            grid.n_v,
            tgrid.n_steps,
        )
        return quotes, ivs
