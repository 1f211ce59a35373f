"""Shared fixtures: small grids for unit tests, full grids for slow tests."""

from typing import Callable, Sequence

import numpy as np
import pytest

from lsv_calibrator.core.cost import cost_coefficients
from lsv_calibrator.core.model import (
    CalibrationProblem,
    DomainSpec,
    FieldTag,
    Grid3Field,
    HestonParams,
    OptionQuote,
    PayoffKind,
    SpotState,
    build_grids,
)

LSV_ROW = HestonParams(kappa=0.5, theta=0.04, xi=0.16, eta_bar=-0.4, r=0.05)
DATA_ROW = HestonParams(kappa=2.0, theta=0.09, xi=0.10, eta_bar=-0.6, r=0.05)
TABLE_LOG_STRIKES = (4.3172, 4.4452, 4.5732, 4.7012, 4.8292)
TABLE_MATURITIES = (0.2, 0.4, 0.6, 0.8, 1.0)
# implied vols of the data row, rows by maturity, columns by log-strike
TABLE_INPUT_IV = (
    (0.2396, 0.2291, 0.2199, 0.2138, 0.2123),
    (0.2488, 0.2422, 0.2359, 0.2303, 0.2257),
    (0.2576, 0.2523, 0.2471, 0.2423, 0.2378),
    (0.2646, 0.2600, 0.2555, 0.2512, 0.2472),
    (0.2699, 0.2659, 0.2620, 0.2581, 0.2544),
)

SMALL_DOMAIN = DomainSpec(n_z=41, n_v=21, v_max=0.4, n_t=20, horizon=0.5)


@pytest.fixture
def lsv_row() -> HestonParams:
    return LSV_ROW


@pytest.fixture
def data_row() -> HestonParams:
    return DATA_ROW


@pytest.fixture
def spot() -> SpotState:
    return SpotState()


@pytest.fixture
def small_domain() -> DomainSpec:
    return SMALL_DOMAIN


def call(strike: float, maturity: float, price: float = 0.0, rate: float = 0.05) -> OptionQuote:
    return OptionQuote(
        kind=PayoffKind.CALL, strike=strike, maturity=maturity, price=price, rate=rate
    )


def put(strike: float, maturity: float, price: float = 0.0, rate: float = 0.05) -> OptionQuote:
    return OptionQuote(
        kind=PayoffKind.PUT, strike=strike, maturity=maturity, price=price, rate=rate
    )


@pytest.fixture
def make_problem() -> Callable[..., CalibrationProblem]:
    """Factory for problems on the small grid (or any given domain)."""

    def factory(
        quotes: Sequence[OptionQuote] = (),
        heston: HestonParams = LSV_ROW,
        domain: DomainSpec = SMALL_DOMAIN,
        epsilon: float = 1e-4,
    ) -> CalibrationProblem:
        spot = SpotState()
        grid, tgrid = build_grids(domain, spot)
        return CalibrationProblem(
            heston=heston,
            spot=spot,
            quotes=tuple(quotes),
            grid=grid,
            tgrid=tgrid,
            cost=cost_coefficients(4.0, 1.0),
            epsilon=epsilon,
        )

    return factory


def reference_sigma2(problem: CalibrationProblem, factor: float = 1.0) -> Grid3Field:
    """sigma^2 = factor * V on every step."""
    values = np.broadcast_to(
        factor * problem.grid.v_mesh,
        (problem.tgrid.n_steps,) + problem.grid.shape,
    )
    return Grid3Field(
        values=np.array(values), tag=FieldTag.SIGMA2, grid=problem.grid, tgrid=problem.tgrid
    )
