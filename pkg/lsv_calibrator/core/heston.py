"""Semi-analytic Heston prices, Black-Scholes prices and implied volatility.

Used to generate synthetic quote sets from a data Heston row and to express
repricing results as implied volatilities. The correlation of the Heston row
is its ``eta_bar``.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import IntegrationWarning, quad
from scipy.optimize import brentq, newton
from scipy.stats import norm

from lsv_calibrator.core.errors import InputError, PricingError
from lsv_calibrator.core.model import HestonParams, OptionQuote, PayoffKind, SpotState

logger = logging.getLogger(__name__)

VOL_BRACKET = (1e-8, 5.0)
PRICE_TOLERANCE = 1e-10
SERIES_THRESHOLD = 1e-4
# smallest relative tolerance brentq accepts
BRENT_RTOL = 4.0 * float(np.finfo(float).eps)


class IvSource(str, Enum):
    INPUT = "input"
    MODEL = "model"


@dataclass(frozen=True)
class IvQuote:
    """An implied volatility read off a price."""

    maturity: float
    strike: float
    implied_vol: float
    source: IvSource = IvSource.INPUT


@dataclass(frozen=True)
class QuadratureConfig:
    """Settings of the Fourier integral; stored alongside generated data."""

    u_max: float = 500.0  # truncation of the frequency axis
    epsabs: float = 1e-12
    epsrel: float = 1e-10
    limit: int = 500  # subintervals for the adaptive Gauss-Kronrod rule
    price_tol: float = 1e-8  # accepted error estimate on the price


def _log1p_ratio(w: np.ndarray) -> np.ndarray:
    """log(1 + w) / w, by its series near zero."""
    w = np.asarray(w, dtype=complex)
    small = np.abs(w) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, w)
    series = 1.0 - w / 2.0 + w * w / 3.0 - w * w * w / 4.0
    return np.where(small, series, np.log1p(safe) / safe)


def heston_charfunc(u, hp: HestonParams, v0: float, maturity: float) -> np.ndarray:
    """E[exp(i u X_T)] for X_T = ln(S_T / F_T), F_T the forward.

    Uses the continuous-branch form with g = (beta - d)/(beta + d) and every
    (beta - d)/xi^2 ratio rewritten through beta^2 - d^2 = -xi^2 (iu + u^2),
    which keeps the function accurate as xi -> 0 and for long maturities.

    Args:
        u: Frequencies, real or complex, scalar or array.
        hp: Heston row; ``eta_bar`` is the correlation.
        v0: Initial variance.
        maturity: Horizon in years.

    Returns:
        Complex characteristic function values.
    """
    u = np.asarray(u, dtype=complex)
    kappa, theta, xi, rho = hp.kappa, hp.theta, hp.xi, hp.eta_bar
    alpha = 1j * u + u * u
    beta = kappa - rho * xi * 1j * u
    d = np.sqrt(beta * beta + xi * xi * alpha)
    beta_plus_d = beta + d
    g = -(xi * xi) * alpha / (beta_plus_d * beta_plus_d)
    decay = np.exp(-d * maturity)
    d_coeff = -alpha / beta_plus_d * (1.0 - decay) / (1.0 - g * decay)
    w_scaled = -alpha * (1.0 - decay) / (beta_plus_d * beta_plus_d * (1.0 - g))
    c_coeff = kappa * theta * (
        -alpha * maturity / beta_plus_d
        - 2.0 * w_scaled * _log1p_ratio(xi * xi * w_scaled)
    )
    return np.exp(c_coeff + d_coeff * v0)


def heston_call_price(
    hp: HestonParams,
    spot: SpotState,
    strike: float,
    maturity: float,
    config: Optional[QuadratureConfig] = None,
) -> float:
    """Discounted European call price under the Heston row.

    Single-integral representation around the forward F:

        C = e^{-rT} [F - sqrt(F K)/pi * int_0^inf Re(e^{i u k} phi(u - i/2))
                                               / (u^2 + 1/4) du],  k = ln(F/K)

    Raises:
        PricingError: Invalid strike/maturity or quadrature failure.
    """
    config = config or QuadratureConfig()
    if not (strike > 0 and maturity > 0):
        raise PricingError(f"need K > 0 and T > 0, got K={strike}, T={maturity}")
    forward = spot.s0 * math.exp(hp.r * maturity)
    log_moneyness = math.log(forward / strike)

    def integrand(u: float) -> float:
        value = np.exp(1j * u * log_moneyness) * heston_charfunc(
            u - 0.5j, hp, spot.v0, maturity
        )
        return float(value.real) / (u * u + 0.25)

    with warnings.catch_warnings():
        warnings.simplefilter("error", IntegrationWarning)
        try:
            integral, abserr = quad(
                integrand,
                0.0,
                config.u_max,
                epsabs=config.epsabs,
                epsrel=config.epsrel,
                limit=config.limit,
            )
        except IntegrationWarning as exc:
            raise PricingError(
                f"Heston quadrature did not converge for K={strike}, T={maturity}: {exc}"
            ) from exc

    discount = math.exp(-hp.r * maturity)
    prefactor = discount * math.sqrt(forward * strike) / math.pi
    if prefactor * abserr > config.price_tol:
        raise PricingError(
            f"Heston quadrature error {prefactor * abserr:.2e} above "
            f"{config.price_tol:.0e} for K={strike}, T={maturity}"
        )
    return discount * forward - prefactor * integral


def heston_put_price(
    hp: HestonParams,
    spot: SpotState,
    strike: float,
    maturity: float,
    config: Optional[QuadratureConfig] = None,
) -> float:
    """Put price by parity with the call."""
    call = heston_call_price(hp, spot, strike, maturity, config)
    return call - spot.s0 + strike * math.exp(-hp.r * maturity)


def bs_call_price(s0: float, strike: float, maturity: float, r: float, vol: float) -> float:
    """Black-Scholes call; vol = 0 gives the discounted forward intrinsic."""
    discount = math.exp(-r * maturity)
    forward = s0 / discount
    total_sd = vol * math.sqrt(maturity)
    if total_sd <= 0.0:
        return discount * max(forward - strike, 0.0)
    d1 = (math.log(forward / strike) + 0.5 * total_sd * total_sd) / total_sd
    d2 = d1 - total_sd
    return discount * (forward * norm.cdf(d1) - strike * norm.cdf(d2))


def bs_vega(s0: float, strike: float, maturity: float, r: float, vol: float) -> float:
    total_sd = vol * math.sqrt(maturity)
    if total_sd <= 0.0:
        return 0.0
    forward = s0 * math.exp(r * maturity)
    d1 = (math.log(forward / strike) + 0.5 * total_sd * total_sd) / total_sd
    return s0 * norm.pdf(d1) * math.sqrt(maturity)


def parity_call_price(
    put_price: float, s0: float, strike: float, maturity: float, r: float
) -> float:
    """Call price carrying the same information as a put price."""
    return put_price + s0 - strike * math.exp(-r * maturity)


def implied_vol(price: float, s0: float, strike: float, maturity: float, r: float) -> float:
    """Black-Scholes implied volatility of a call price.

    Newton from a Brenner-Subrahmanyam start, falling back to Brent's method
    on the bracket VOL_BRACKET.

    Returns:
        The volatility; 0.0 when the price equals the intrinsic bound.

    Raises:
        PricingError: Price outside [intrinsic, spot] or no root in the bracket.
    """
    if not (strike > 0 and maturity > 0 and s0 > 0):
        raise PricingError(f"need S0, K, T > 0, got {s0}, {strike}, {maturity}")
    intrinsic = max(s0 - strike * math.exp(-r * maturity), 0.0)
    if price < intrinsic - PRICE_TOLERANCE:
        raise PricingError(
            f"price {price:.10g} below intrinsic bound {intrinsic:.10g} "
            f"(K={strike}, T={maturity})"
        )
    if price >= s0:
        raise PricingError(
            f"price {price:.10g} at or above spot bound {s0:.10g} (K={strike}, T={maturity})"
        )
    if price <= intrinsic + 1e-14 * max(1.0, s0):
        return 0.0

    def residual(vol: float) -> float:
        return bs_call_price(s0, strike, maturity, r, vol) - price

    def slope(vol: float) -> float:
        return bs_vega(s0, strike, maturity, r, vol)

    guess = math.sqrt(2.0 * math.pi / maturity) * price / s0
    guess = min(max(guess, 0.05), 2.0)
    vol = None
    try:
        candidate = newton(residual, guess, fprime=slope, tol=1e-14, maxiter=50)
        if VOL_BRACKET[0] < candidate < VOL_BRACKET[1] and abs(
            residual(candidate)
        ) <= PRICE_TOLERANCE:
            vol = float(candidate)
    except (RuntimeError, ZeroDivisionError, OverflowError):
        pass
    if vol is None:
        low, high = VOL_BRACKET
        if residual(low) * residual(high) > 0:
            raise PricingError(
                f"no implied vol in {VOL_BRACKET} for price {price:.10g} "
                f"(K={strike}, T={maturity})"
            )
        try:
            vol = float(
                brentq(residual, low, high, xtol=1e-15, rtol=BRENT_RTOL, maxiter=200)
            )
        except (ValueError, RuntimeError) as exc:
            raise PricingError(
                f"implied vol search failed for price {price:.10g} "
                f"(K={strike}, T={maturity}): {exc}"
            ) from exc
    return vol


@dataclass(frozen=True)
class QuoteSetSpec:
    """Strike-by-maturity grid of synthetic quotes.

    The default 13 log-strikes per maturity contain the strikes 4.3172,
    4.4452, 4.5732, 4.7012 and 4.8292 as every third entry.
    """

    log_strike_min: float = 4.3172
    log_strike_max: float = 4.8292
    n_strikes: int = 13
    maturities: Tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    kind: PayoffKind = PayoffKind.CALL

    def violations(self) -> List[str]:
        found = []
        if not self.maturities:
            found.append("no maturities")
        elif min(self.maturities) <= 0:
            found.append(f"maturities must be positive, got {list(self.maturities)}")
        if self.n_strikes < 1:
            found.append(f"need at least one strike, got n_strikes={self.n_strikes}")
        elif self.n_strikes > 1 and not self.log_strike_min < self.log_strike_max:
            found.append(
                f"empty strike range [{self.log_strike_min}, {self.log_strike_max}]"
            )
        if self.kind is PayoffKind.CUSTOM:
            found.append("synthetic quotes must be calls or puts")
        return found

    def log_strikes(self) -> np.ndarray:
        return np.linspace(self.log_strike_min, self.log_strike_max, self.n_strikes)


def quote_grid(spec: QuoteSetSpec, rate: float) -> Tuple[OptionQuote, ...]:
    """Unpriced quotes ordered by maturity then strike.

    Raises:
        InputError: Invalid quote grid.
    """
    problems = spec.violations()
    if problems:
        raise InputError("; ".join(problems))
    return tuple(
        OptionQuote(
            kind=spec.kind,
            strike=math.exp(float(log_strike)),
            maturity=float(maturity),
            price=0.0,
            rate=rate,
        )
        for maturity in spec.maturities
        for log_strike in spec.log_strikes()
    )


def call_equivalent_iv(quote: OptionQuote, s0: float) -> float:
    """Implied vol of a call or put quote; puts go through put-call parity."""
    price = quote.price
    if quote.kind is PayoffKind.PUT:
        price = parity_call_price(price, s0, quote.strike, quote.maturity, quote.rate)
    return implied_vol(price, s0, quote.strike, quote.maturity, quote.rate)


def generate_quotes(
    hp: HestonParams,
    spot: SpotState,
    spec: Optional[QuoteSetSpec] = None,
    config: Optional[QuadratureConfig] = None,
) -> Tuple[Tuple[OptionQuote, ...], np.ndarray]:
    """Price the quote grid under a Heston row with the Fourier pricer.

    Returns:
        Quotes ordered by maturity then strike, and their implied vols.

    Raises:
        InputError: Invalid quote grid.
        PricingError: Quadrature or implied vol failure.
    """
    spec = spec or QuoteSetSpec()
    quotes = []
    for quote in quote_grid(spec, hp.r):
        if quote.kind is PayoffKind.PUT:
            price = heston_put_price(hp, spot, quote.strike, quote.maturity, config)
        else:
            price = heston_call_price(hp, spot, quote.strike, quote.maturity, config)
        quotes.append(quote.with_price(price))
    ivs = np.array([call_equivalent_iv(quote, spot.s0) for quote in quotes])
    logger.info(
        "Generated %d quotes over %d maturities", len(quotes), len(spec.maturities)
    )
    return tuple(quotes), ivs
