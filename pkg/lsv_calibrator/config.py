"""Run configuration.

``RunConfig`` gathers every component's dataclass config in one pydantic model
that round-trips through JSON. Defaults reproduce the two-row experiment: a
reference LSV row pulled onto quotes generated by a different Heston row.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import List, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from lsv_calibrator.core.calibrator import OptimizerSettings
from lsv_calibrator.core.cost import CostConfig
from lsv_calibrator.core.errors import InputError
from lsv_calibrator.core.heston import QuadratureConfig, QuoteSetSpec
from lsv_calibrator.core.hjb import HjbConfig
from lsv_calibrator.core.model import (
    CalibrationProblem,
    DomainSpec,
    HestonParams,
    OptionQuote,
    SpotState,
    build_grids,
    snap_maturities,
)
from lsv_calibrator.core.parser import QuoteFileConfig
from lsv_calibrator.core.pricer import PricerConfig
from lsv_calibrator.core.reporter import ReportConfig

logger = logging.getLogger(__name__)

DATA_HESTON = HestonParams(kappa=2.0, theta=0.09, xi=0.10, eta_bar=-0.6, r=0.05)


class QuoteGenerator(str, Enum):
    """How ``generate`` prices synthetic quotes."""

    PDE = "pde"  # the data row on the calibration grids
    ANALYTIC = "analytic"  # Fourier pricer


class RunConfig(BaseModel):
    """Everything a generate / calibrate / price / report run needs."""

    model_config = ConfigDict(extra="forbid")

    lsv: HestonParams = Field(default_factory=HestonParams, description="Reference LSV row")
    data_heston: HestonParams = Field(
        default_factory=lambda: DATA_HESTON, description="Row generating synthetic quotes"
    )
    spot: SpotState = Field(default_factory=SpotState)
    domain: DomainSpec = Field(default_factory=DomainSpec)
    quote_set: QuoteSetSpec = Field(default_factory=QuoteSetSpec)
    quote_generator: QuoteGenerator = Field(
        QuoteGenerator.PDE, description="Pricer used for synthetic quotes"
    )
    cost: CostConfig = Field(default_factory=CostConfig)
    hjb: HjbConfig = Field(default_factory=HjbConfig)
    pricer: PricerConfig = Field(default_factory=PricerConfig)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    epsilon: float = Field(1e-4, description="Stopping tolerance on the gradient sup-norm")
    snap_maturities: bool = Field(False, description="Move maturities onto the time mesh")

    @model_validator(mode="after")
    def _check_invariants(self) -> "RunConfig":
        found = self.violations()
        if found:
            raise ValueError("; ".join(found))
        return self

    def violations(self) -> List[str]:
        """Every breached invariant, prefixed with its section."""
        found = [f"lsv: {item}" for item in self.lsv.violations()]
        found += [f"data_heston: {item}" for item in self.data_heston.violations()]
        found += [f"spot: {item}" for item in self.spot.violations()]
        found += [f"quote_set: {item}" for item in self.quote_set.violations()]
        if self.lsv.r != self.data_heston.r:
            found.append(
                f"data_heston: rate {self.data_heston.r} differs from lsv rate {self.lsv.r}"
            )
        domain = self.domain
        if min(domain.n_z, domain.n_v) < 3:
            found.append(f"domain: node count below minimum 3 ({domain.n_z}x{domain.n_v})")
        if domain.n_t < 1 or not domain.horizon > 0:
            found.append(f"domain: invalid time mesh {domain.n_t} steps on {domain.horizon}")
        if not self.cost.p > 1:
            found.append(f"cost: exponent must exceed 1, got {self.cost.p}")
        if not self.cost.scale > 0:
            found.append(f"cost: scale must be positive, got {self.cost.scale}")
        if not 0.0 < self.hjb.theta_adi <= 1.0:
            found.append(f"hjb: theta_adi must lie in (0, 1], got {self.hjb.theta_adi}")
        if self.hjb.rannacher_steps < 0:
            found.append(
                f"hjb: rannacher_steps must be >= 0, got {self.hjb.rannacher_steps}"
            )
        if self.pricer.workers < 1:
            found.append(f"pricer: workers must be at least 1, got {self.pricer.workers}")
        if not self.pricer.mass_tol > 0:
            found.append(f"pricer: mass_tol must be positive, got {self.pricer.mass_tol}")
        if self.optimizer.max_iter < 0 or self.optimizer.memory < 1:
            found.append("optimizer: max_iter must be >= 0 and memory >= 1")
        if not self.optimizer.spectral_step > 0 or self.optimizer.fallback_evaluations < 1:
            found.append(
                "optimizer: spectral_step must be positive and fallback_evaluations >= 1"
            )
        if not self.epsilon > 0:
            found.append(f"epsilon must be positive, got {self.epsilon}")
        return found

    def quote_file_config(self) -> QuoteFileConfig:
        return QuoteFileConfig(default_rate=self.data_heston.r)


def dump_config(config: RunConfig) -> str:
    """Serialize with every default materialized."""
    return config.model_dump_json(indent=2) + "\n"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse JSON config text.

    Raises:
        InputError: Listing every invalid field.
    """
    try:
        return RunConfig.model_validate_json(text)
    except ValidationError as exc:
        details = "; ".join(
            f"{'.'.join(str(part) for part in error['loc']) or 'config'}: {error['msg']}"
            for error in exc.errors()
        )
        raise InputError(f"{source}: invalid config: {details}") from None


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    return parse_config(text, str(path))


def build_problem(config: RunConfig, quotes: Sequence[OptionQuote]) -> CalibrationProblem:
    """Grids, cost and quotes assembled into a calibration problem."""
    grid, tgrid = build_grids(config.domain, config.spot)
    quotes = tuple(quotes)
    if config.snap_maturities:
        quotes = snap_maturities(quotes, tgrid)
    return CalibrationProblem(
        heston=config.lsv,
        spot=config.spot,
        quotes=quotes,
        grid=grid,
        tgrid=tgrid,
        cost=config.cost.params(),
        epsilon=config.epsilon,
    )
