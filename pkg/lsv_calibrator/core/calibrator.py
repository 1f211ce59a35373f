"""Outer maximization of the dual objective over the price multipliers.

J(lambda) = sum_i lambda_i c_i - phi(0, Z0, V0) is concave, and its gradient is
c_i - E[G_i(Z_{t_i})] under the sigma^2 field selected by the HJB solve at
lambda. One HJB solve and one forward density solve give J and the whole
gradient. The ascent runs L-BFGS-B on -J. The gradient is the price residual
of the frozen field, which matches the derivative of the discrete J only up
to O(dt), so when the line search gives up early a spectral residual phase
finishes the job on ||grad J||_inf directly.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize, root

from lsv_calibrator.core.errors import InputError, NumericalError, PricingError
from lsv_calibrator.core.heston import implied_vol, parity_call_price
from lsv_calibrator.core.hjb import HJBSolver, HjbConfig, HjbSolution, dual_value
from lsv_calibrator.core.model import (
    CalibrationProblem,
    FieldTag,
    Grid2D,
    Grid3Field,
    HestonParams,
    PayoffKind,
    validate_problem,
)
from lsv_calibrator.core.pricer import DensityPath, ForwardPricer, PricerConfig

logger = logging.getLogger(__name__)

ETA_SLACK = 1e-12


@dataclass(frozen=True)
class OptimizerSettings:
    """Settings of the multiplier search."""

    max_iter: int = 500
    memory: int = 10  # L-BFGS correction pairs
    max_line_search: int = 20
    ftol: float = 1e-15  # relative J change that ends the quasi-Newton phase
    spectral_step: float = 1.0  # first step length of the residual phase
    fallback_evaluations: int = 400  # solver calls allowed in the residual phase
    lambda0: Optional[Tuple[float, ...]] = None  # None starts from zero


@dataclass(frozen=True)
class LambdaVector:
    """Multipliers with the objective and gradient evaluated there."""

    values: np.ndarray
    objective: float
    gradient: np.ndarray

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.gradient))) if self.gradient.size else 0.0


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    grad_norm: float
    phase: str


@dataclass(frozen=True)
class RepricingRow:
    """Market against model for one quote."""

    index: int
    kind: str
    strike: float
    maturity: float
    market_price: float
    model_price: float
    input_iv: float
    model_iv: float

    @property
    def error(self) -> float:
        return self.market_price - self.model_price

    @property
    def iv_error(self) -> float:
        return self.input_iv - self.model_iv


@dataclass(frozen=True)
class CalibrationResult:
    """Everything a calibration run produces, converged or not."""

    lambda_star: LambdaVector
    converged: bool
    iterations: int
    sigma2: Grid3Field
    eta: Grid3Field
    hjb: HjbSolution
    density: DensityPath
    model_prices: np.ndarray
    repricing: Tuple[RepricingRow, ...]
    trace: Tuple[IterationRecord, ...] = ()
    message: str = ""

    @property
    def objective(self) -> float:
        return self.lambda_star.objective

    @property
    def grad_norm(self) -> float:
        return self.lambda_star.grad_norm


@dataclass
class _Evaluation:
    point: LambdaVector
    hjb: HjbSolution
    density: DensityPath
    model_prices: np.ndarray


@dataclass
class _Evaluator:
    """Memoizes the last few (J, gradient) evaluations of one problem."""

    calibrator: "Calibrator"
    problem: CalibrationProblem
    capacity: int = 4
    cache: "OrderedDict[bytes, _Evaluation]" = field(default_factory=OrderedDict)
    count: int = 0

    def __call__(self, lambdas: np.ndarray) -> _Evaluation:
        values = np.ascontiguousarray(lambdas, dtype=float)
        key = values.tobytes()
        if key in self.cache:
            self.cache.move_to_end(key)
            return self.cache[key]
        evaluation = self.calibrator.evaluate(self.problem, values)
        self.count += 1
        self.cache[key] = evaluation
        if len(self.cache) > self.capacity:
            self.cache.popitem(last=False)
        return evaluation


class Calibrator:
    """Dual ascent on the multipliers, one HJB and one density solve per point."""

    def __init__(
        self,
        settings: Optional[OptimizerSettings] = None,
        hjb_config: Optional[HjbConfig] = None,
        pricer_config: Optional[PricerConfig] = None,
    ):
        """Initialize the calibrator.

        Args:
            settings: Optimizer settings. If None, uses defaults.
            hjb_config: HJB time-stepping settings.
            pricer_config: Forward pricing settings.
        """
        self.settings = settings or OptimizerSettings()
        self.solver = HJBSolver(hjb_config)
        self.pricer = ForwardPricer(pricer_config, self.solver.config)

    def evaluate(self, problem: CalibrationProblem, lambdas: Sequence[float]) -> _Evaluation:
        """J, gradient, the HJB solution and the density path at ``lambdas``."""
        values = np.array(lambdas, dtype=float).reshape(-1)
        hjb = self.solver.solve_hjb(problem, values)
        density = self.pricer.solve_fokker_planck(problem, hjb.sigma2)
        model_prices = self.pricer.prices_from_density(density, problem.quotes)
        point = LambdaVector(
            values=values,
            objective=dual_value(problem, values, hjb.phi_at_spot),
            gradient=problem.prices - model_prices,
        )
        return _Evaluation(point=point, hjb=hjb, density=density, model_prices=model_prices)

    def gradient(self, problem: CalibrationProblem, lambdas: Sequence[float]) -> np.ndarray:
        """dJ/dlambda_i = c_i - E[G_i(Z_{t_i})] under the field selected at lambda."""
        return self.evaluate(problem, lambdas).point.gradient

    def _start(
        self, problem: CalibrationProblem, settings: OptimizerSettings
    ) -> np.ndarray:
        if settings.lambda0 is None:
            return np.zeros(problem.m)
        start = np.array(settings.lambda0, dtype=float)
        if start.size != problem.m:
            raise InputError(
                f"lambda0 has {start.size} entries, problem has {problem.m} quotes"
            )
        return start

    def calibrate(
        self, problem: CalibrationProblem, settings: Optional[OptimizerSettings] = None
    ) -> CalibrationResult:
        """Maximize J until ||grad J||_inf <= epsilon or the budget runs out.

        Args:
            problem: Calibration problem; an empty quote list is a degenerate
                run returning the reference surfaces.
            settings: Overrides the settings given at construction.

        Returns:
            The result at the best multipliers found. ``converged`` is False
            when the iteration budget ran out first.

        Raises:
            InputError: Invalid problem.
            NumericalError: Propagated from the solvers.
        """
        settings = settings or self.settings
        validate_problem(problem, allow_empty=True).raise_if_invalid()
        evaluator = _Evaluator(self, problem)
        trace: List[IterationRecord] = []
        epsilon = problem.epsilon

        best = evaluator(self._start(problem, settings))
        trace.append(IterationRecord(0, best.point.objective, best.point.grad_norm, "start"))
        logger.info(
            "Calibrating %d quotes: J=%.10g |grad|=%.3e (epsilon=%.1e)",
            problem.m,
            best.point.objective,
            best.point.grad_norm,
            epsilon,
        )

        if problem.m and best.point.grad_norm > epsilon:
            best = self._quasi_newton(evaluator, best, trace, settings)
        if problem.m and best.point.grad_norm > epsilon:
            best = self._spectral_residual(evaluator, best, trace, settings)

        converged = best.point.grad_norm <= epsilon
        iterations = trace[-1].iteration
        if converged:
            message = f"converged in {iterations} iterations"
            logger.info("Calibration %s, J=%.10g", message, best.point.objective)
        else:
            message = (
                f"not converged after {iterations} iterations: "
                f"|grad|={best.point.grad_norm:.3e} > {epsilon:.1e}"
            )
            logger.warning("Calibration %s", message)
        logger.debug("Objective evaluations: %d", evaluator.count)

        sigma2, eta = self.recover_surfaces(best.hjb, problem.heston, problem.grid)
        return CalibrationResult(
            lambda_star=best.point,
            converged=converged,
            iterations=iterations,
            sigma2=sigma2,
            eta=eta,
            hjb=best.hjb,
            density=best.density,
            model_prices=best.model_prices,
            repricing=tuple(self.repricing(problem, best.model_prices)),
            trace=tuple(trace),
            message=message,
        )

    def _quasi_newton(
        self,
        evaluator: _Evaluator,
        start: _Evaluation,
        trace: List[IterationRecord],
        settings: OptimizerSettings,
    ) -> _Evaluation:
        if settings.max_iter == 0:
            return start

        def negated(x: np.ndarray) -> Tuple[float, np.ndarray]:
            point = evaluator(x).point
            return -point.objective, -point.gradient

        def record(xk: np.ndarray) -> None:
            point = evaluator(xk).point
            trace.append(
                IterationRecord(len(trace), point.objective, point.grad_norm, "lbfgs")
            )
            logger.info(
                "Iteration %d: J=%.10g |grad|=%.3e",
                len(trace) - 1,
                point.objective,
                point.grad_norm,
            )

        outcome = minimize(
            negated,
            start.point.values,
            jac=True,
            method="L-BFGS-B",
            callback=record,
            options={
                "maxiter": settings.max_iter,
                "maxcor": settings.memory,
                "maxls": settings.max_line_search,
                "gtol": evaluator.problem.epsilon,
                "ftol": settings.ftol,
            },
        )
        logger.debug("L-BFGS-B stopped: %s", outcome.message)
        final = evaluator(outcome.x)
        return final if final.point.objective >= start.point.objective else start

    def _spectral_residual(
        self,
        evaluator: _Evaluator,
        start: _Evaluation,
        trace: List[IterationRecord],
        settings: OptimizerSettings,
    ) -> _Evaluation:
        """Drive the price residual to zero with spectral gradient steps.

        Each step is lambda + sigma_k grad J with a Barzilai-Borwein length
        sigma_k and a nonmonotone line search on ||grad J||. The best point by
        ||grad J||_inf is returned.
        """
        problem = evaluator.problem
        if trace[-1].iteration >= settings.max_iter:
            return start
        best = start
        first = True

        def residual(x: np.ndarray) -> np.ndarray:
            return -evaluator(x).point.gradient

        def record(xk: np.ndarray, fk: np.ndarray) -> None:
            nonlocal best, first
            if first:
                first = False
                return
            current = evaluator(xk)
            if current.point.grad_norm < best.point.grad_norm:
                best = current
            trace.append(
                IterationRecord(
                    trace[-1].iteration + 1,
                    current.point.objective,
                    current.point.grad_norm,
                    "spectral",
                )
            )
            logger.info(
                "Spectral %d: J=%.10g |grad|=%.3e",
                trace[-1].iteration,
                current.point.objective,
                current.point.grad_norm,
            )

        outcome = root(
            residual,
            start.point.values,
            method="df-sane",
            callback=record,
            options={
                "fatol": problem.epsilon,
                "ftol": 0.0,
                "fnorm": lambda f: float(np.max(np.abs(f))),
                "maxfev": settings.fallback_evaluations,
                "sigma_0": settings.spectral_step,
            },
        )
        logger.debug("Spectral phase stopped: %s", outcome.message)
        return best

    def recover_surfaces(
        self, hjb: HjbSolution, hp: HestonParams, grid: Grid2D
    ) -> Tuple[Grid3Field, Grid3Field]:
        """sigma^2 from the HJB solve and eta = eta_bar sqrt(V) / sigma.

        On the V = 0 row eta takes the value eta_bar.

        Raises:
            NumericalError: If |eta| > 1 anywhere.
        """
        sigma2 = hjb.sigma2
        v = grid.v_mesh[np.newaxis, :, :]
        live = np.broadcast_to(v > 0.0, sigma2.values.shape)
        eta = np.full(sigma2.values.shape, hp.eta_bar)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.sqrt(np.broadcast_to(v, sigma2.values.shape) / sigma2.values)
        eta[live] = hp.eta_bar * ratio[live]
        worst = float(np.max(np.abs(eta))) if eta.size else 0.0
        if not np.all(np.isfinite(eta)) or worst > 1.0 + ETA_SLACK:
            k, i, j = np.unravel_index(int(np.nanargmax(np.abs(eta))), eta.shape)
            raise NumericalError(
                f"correlation surface leaves [-1,1]: |eta|={worst:.6g} at "
                f"step {k}, node ({i}, {j})"
            )
        return sigma2, Grid3Field(values=eta, tag=FieldTag.ETA, grid=grid, tgrid=sigma2.tgrid)

    def repricing(
        self, problem: CalibrationProblem, model_prices: np.ndarray
    ) -> List[RepricingRow]:
        """Market and model prices side by side, with implied vols where defined."""
        s0, r = problem.spot.s0, problem.heston.r
        rows = []
        for index, (quote, model) in enumerate(zip(problem.quotes, model_prices)):
            terms = (s0, quote.strike, quote.maturity, r)
            rows.append(
                RepricingRow(
                    index=index,
                    kind=quote.kind.value,
                    strike=quote.strike,
                    maturity=quote.maturity,
                    market_price=quote.price,
                    model_price=float(model),
                    input_iv=quote_implied_vol(quote.kind, quote.price, *terms),
                    model_iv=quote_implied_vol(quote.kind, float(model), *terms),
                )
            )
        return rows


def quote_implied_vol(
    kind: PayoffKind, price: float, s0: float, strike: float, maturity: float, r: float
) -> float:
    """Implied vol of a call or put price; NaN for tabulated payoffs or failures."""
    if kind is PayoffKind.CUSTOM:
        return math.nan
    call = price
    if kind is PayoffKind.PUT:
        call = parity_call_price(price, s0, strike, maturity, r)
    try:
        return implied_vol(call, s0, strike, maturity, r)
    except PricingError as exc:
        logger.warning(
            "No implied vol for %s K=%g T=%g: %s", kind.value, strike, maturity, exc
        )
        return math.nan
