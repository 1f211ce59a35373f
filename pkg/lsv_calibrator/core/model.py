"""Domain types, grids and payoffs shared by the solvers.

The computational domain is the rectangle Q = [Z_min, Z_max] x [V_min, V_max]
in (log-price, variance), sampled on a uniform tensor grid, together with a
uniform time mesh t_k = k * dt on [0, T].
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from lsv_calibrator.core.cost import CostParams
from lsv_calibrator.core.errors import InputError

logger = logging.getLogger(__name__)

MIN_NODES = 3
STEP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class HestonParams:
    """Reference Heston row: the model the LSV surface is pulled towards."""

    kappa: float = 0.5  # mean reversion, 1/year
    theta: float = 0.04  # long-run variance
    xi: float = 0.16  # vol-of-vol
    eta_bar: float = -0.4  # constant correlation
    r: float = 0.05  # risk-free rate, 1/year

    def violations(self) -> List[str]:
        """List every breached parameter invariant."""
        found = []
        if not self.kappa > 0:
            found.append(f"kappa must be positive, got {self.kappa}")
        if not self.theta > 0:
            found.append(f"theta must be positive, got {self.theta}")
        if not self.xi > 0:
            found.append(f"xi must be positive, got {self.xi}")
        if not -1.0 <= self.eta_bar <= 1.0:
            found.append(f"correlation outside [-1,1]: eta_bar={self.eta_bar}")
        if not math.isfinite(self.r):
            found.append(f"rate must be finite, got {self.r}")
        return found

    @property
    def feller_satisfied(self) -> bool:
        return 2.0 * self.kappa * self.theta >= self.xi**2


@dataclass(frozen=True)
class SpotState:
    """Initial state (Z0, V0); the initial law is the point mass there."""

    z0: float = math.log(100.0)
    v0: float = 0.04

    @classmethod
    def from_price(cls, s0: float, v0: float) -> "SpotState":
        if s0 <= 0:
            raise InputError(f"spot price must be positive, got {s0}")
        return cls(z0=math.log(s0), v0=v0)

    @property
    def s0(self) -> float:
        return math.exp(self.z0)

    def violations(self) -> List[str]:
        found = []
        if not self.v0 > 0:
            found.append(f"initial variance must be positive, got {self.v0}")
        if not math.isfinite(self.z0):
            found.append(f"log spot must be finite, got {self.z0}")
        return found


class PayoffKind(str, Enum):
    """Supported European payoffs."""

    CALL = "call"
    PUT = "put"
    CUSTOM = "custom"


@dataclass(frozen=True)
class OptionQuote:
    """One European claim E[G(Z_t)] = price.

    Call and put payoffs are discounted at ``rate`` from ``maturity``. Custom
    payoffs are a table of (z, value) pairs taken as already discounted,
    interpolated linearly and held flat outside the table.
    """

    kind: PayoffKind
    strike: float
    maturity: float
    price: float
    rate: float = 0.0
    table: Tuple[Tuple[float, float], ...] = ()

    @property
    def log_strike(self) -> float:
        return math.log(self.strike) if self.strike > 0 else float("nan")

    @property
    def discount(self) -> float:
        return math.exp(-self.rate * self.maturity)

    def with_maturity(self, maturity: float) -> "OptionQuote":
        return replace(self, maturity=maturity)

    def with_price(self, price: float) -> "OptionQuote":
        return replace(self, price=price)


def payoff_eval(quote: OptionQuote, z: np.ndarray) -> np.ndarray:
    """Evaluate the discounted payoff G(z) of a quote.

    Args:
        quote: The claim.
        z: Log-prices (scalar or array).

    Returns:
        Array of payoff values with the shape of ``z``.
    """
    z = np.asarray(z, dtype=float)
    if quote.kind is PayoffKind.CALL:
        return quote.discount * np.maximum(np.exp(z) - quote.strike, 0.0)
    if quote.kind is PayoffKind.PUT:
        return quote.discount * np.maximum(quote.strike - np.exp(z), 0.0)
    nodes = np.array([point[0] for point in quote.table], dtype=float)
    values = np.array([point[1] for point in quote.table], dtype=float)
    order = np.argsort(nodes, kind="stable")
    return np.interp(z, nodes[order], values[order])


def constant_payoff(value: float, maturity: float, price: float = 0.0) -> OptionQuote:
    """Tabulated claim paying ``value`` in every state."""
    return OptionQuote(
        kind=PayoffKind.CUSTOM,
        strike=0.0,
        maturity=maturity,
        price=price,
        table=((0.0, value),),
    )


@dataclass(frozen=True)
class DomainSpec:
    """How to lay out the computational domain around the spot.

    When ``z_min``/``z_max`` are not given the Z-range is
    Z0 -/+ z_half_width_sd * sqrt(V0).
    """

    z_half_width_sd: float = 4.0
    z_min: Optional[float] = None
    z_max: Optional[float] = None
    v_min: float = 0.0
    v_max: float = 0.5
    n_z: int = 51
    n_v: int = 51
    horizon: float = 1.0
    n_t: int = 100  # time steps; the mesh has n_t + 1 nodes


@dataclass(frozen=True)
class Grid2D:
    """Uniform (Z, V) tensor grid with the spot on a node."""

    z: np.ndarray = field(repr=False, compare=False)
    v: np.ndarray = field(repr=False, compare=False)
    spot_index: Tuple[int, int]
    snap_displacement: Tuple[float, float] = (0.0, 0.0)

    @property
    def n_z(self) -> int:
        return int(self.z.size)

    @property
    def n_v(self) -> int:
        return int(self.v.size)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_z, self.n_v)

    @property
    def z_min(self) -> float:
        return float(self.z[0])

    @property
    def z_max(self) -> float:
        return float(self.z[-1])

    @property
    def v_min(self) -> float:
        return float(self.v[0])

    @property
    def v_max(self) -> float:
        return float(self.v[-1])

    @property
    def dz(self) -> float:
        return (self.z_max - self.z_min) / (self.n_z - 1)

    @property
    def dv(self) -> float:
        return (self.v_max - self.v_min) / (self.n_v - 1)

    @property
    def cell_area(self) -> float:
        return self.dz * self.dv

    @cached_property
    def v_mesh(self) -> np.ndarray:
        """Variance at every node, shape (n_z, n_v)."""
        mesh = np.broadcast_to(self.v[np.newaxis, :], self.shape).copy()
        mesh.setflags(write=False)
        return mesh

    def metadata(self) -> Dict[str, object]:
        return {
            "z_min": self.z_min,
            "z_max": self.z_max,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "n_z": self.n_z,
            "n_v": self.n_v,
            "spot_index": list(self.spot_index),
        }


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time mesh t_k = k * dt, k = 0..n_steps."""

    horizon: float
    n_steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def step_index(self, t: float) -> Optional[int]:
        """Index k with t_k == t, or None when t is not a mesh node."""
        ratio = t / self.dt
        k = int(round(ratio))
        if abs(ratio - k) > STEP_TOLERANCE * max(1.0, abs(ratio)):
            return None
        if k < 0 or k > self.n_steps:
            return None
        return k

    def nearest_step(self, t: float) -> int:
        return int(min(max(round(t / self.dt), 0), self.n_steps))

    def metadata(self) -> Dict[str, object]:
        return {"horizon": self.horizon, "n_steps": self.n_steps}


def _snap_z(spec: DomainSpec, spot: SpotState) -> Tuple[np.ndarray, int, float]:
    if spec.z_min is None or spec.z_max is None:
        half_width = spec.z_half_width_sd * math.sqrt(spot.v0)
        z_min, z_max = spot.z0 - half_width, spot.z0 + half_width
    else:
        z_min, z_max = spec.z_min, spec.z_max
    if not z_min < z_max:
        raise InputError(f"empty Z-range [{z_min}, {z_max}]")
    if not z_min <= spot.z0 <= z_max:
        raise InputError(
            f"spot outside domain: Z0={spot.z0} not in [{z_min}, {z_max}]"
        )
    dz = (z_max - z_min) / (spec.n_z - 1)
    i0 = int(round((spot.z0 - z_min) / dz))
    shift = spot.z0 - (z_min + i0 * dz)
    # both bounds move by the same amount so the spacing is unchanged
    z = spot.z0 + (np.arange(spec.n_z) - i0) * dz
    return z, i0, shift


def _snap_v(spec: DomainSpec, spot: SpotState) -> Tuple[np.ndarray, int, float]:
    if not 0.0 <= spec.v_min < spec.v_max:
        raise InputError(f"invalid V-range [{spec.v_min}, {spec.v_max}]")
    if not spec.v_min < spot.v0 <= spec.v_max:
        raise InputError(
            f"spot outside domain: V0={spot.v0} not in ({spec.v_min}, {spec.v_max}]"
        )
    dv_nominal = (spec.v_max - spec.v_min) / (spec.n_v - 1)
    j0 = max(1, int(round((spot.v0 - spec.v_min) / dv_nominal)))
    dv = (spot.v0 - spec.v_min) / j0
    v = spec.v_min + np.arange(spec.n_v) * dv
    v[0] = spec.v_min
    v[j0] = spot.v0
    return v, j0, float(v[-1] - spec.v_max)


def build_grids(
    spec: Optional[DomainSpec], spot: SpotState
) -> Tuple[Grid2D, TimeGrid]:
    """Build the space and time grids with (Z0, V0) on a node.

    The Z-bounds are shifted together so that Z0 falls on the nearest node;
    V keeps its lower bound and rescales its spacing so that V0 is a node.

    Args:
        spec: Domain layout. If None, uses the defaults.
        spot: Initial state.

    Returns:
        Tuple of the (Z, V) grid and the time grid.

    Raises:
        InputError: Node counts below the minimum or spot outside the domain.
    """
    spec = spec or DomainSpec()
    if spec.n_z < MIN_NODES or spec.n_v < MIN_NODES:
        raise InputError(
            f"node count below minimum {MIN_NODES}: n_z={spec.n_z}, n_v={spec.n_v}"
        )
    if spec.n_t < 1 or not spec.horizon > 0:
        raise InputError(
            f"invalid time mesh: horizon={spec.horizon}, n_t={spec.n_t}"
        )
    for problem in spot.violations():
        raise InputError(problem)

    z, i0, z_shift = _snap_z(spec, spot)
    v, j0, v_shift = _snap_v(spec, spot)
    z.setflags(write=False)
    v.setflags(write=False)
    if z_shift or v_shift:
        logger.debug("Snapped spot onto grid: dZ=%.3e dV_max=%.3e", z_shift, v_shift)
    grid = Grid2D(z=z, v=v, spot_index=(i0, j0), snap_displacement=(z_shift, v_shift))
    return grid, TimeGrid(horizon=spec.horizon, n_steps=spec.n_t)


class FieldTag(str, Enum):
    """Semantic tag carried by every sampled field."""

    PHI = "phi"
    SIGMA2 = "sigma2"
    ETA = "eta"
    DENSITY = "density"
    PRICE_SLICE = "price-slice"

    @property
    def per_step(self) -> bool:
        """Controls live on steps (n_steps slices); states live on nodes."""
        return self in (FieldTag.SIGMA2, FieldTag.ETA)


@dataclass(frozen=True)
class Grid3Field:
    """A scalar field sampled on the (t, Z, V) grid, indexed [k, i, j]."""

    values: np.ndarray = field(repr=False, compare=False)
    tag: FieldTag
    grid: Grid2D
    tgrid: TimeGrid

    def __post_init__(self) -> None:
        slices = self.tgrid.n_steps if self.tag.per_step else self.tgrid.n_steps + 1
        expected = (slices, self.grid.n_z, self.grid.n_v)
        if self.values.shape != expected:
            raise InputError(
                f"{self.tag.value} field has shape {self.values.shape}, "
                f"expected {expected}"
            )
        frozen = np.array(self.values, dtype=float, copy=True)
        frozen.setflags(write=False)
        object.__setattr__(self, "values", frozen)

    def at_spot(self, k: int) -> float:
        i0, j0 = self.grid.spot_index
        return float(self.values[k, i0, j0])

    def masses(self) -> np.ndarray:
        """Total mass per slice (meaningful for densities)."""
        return self.values.sum(axis=(1, 2)) * self.grid.cell_area

    def density_violations(
        self, mass_tol: float, negative_tol: float = 1e-6
    ) -> List[str]:
        """Check the density invariants: nonnegative entries, unit mass."""
        found = []
        negative = np.minimum(self.values, 0.0).sum(axis=(1, 2)) * self.grid.cell_area
        for k in np.flatnonzero(negative < -negative_tol):
            found.append(f"slice {k}: negative mass {negative[k]:.3e}")
        for k, mass in enumerate(self.masses()):
            if abs(mass - 1.0) > mass_tol:
                found.append(f"slice {k}: mass {mass:.6f} outside 1 +/- {mass_tol}")
        return found


@dataclass(frozen=True)
class CalibrationProblem:
    """Everything the dual solver needs: reference row, quotes, grids, cost."""

    heston: HestonParams
    spot: SpotState
    quotes: Tuple[OptionQuote, ...]
    grid: Grid2D
    tgrid: TimeGrid
    cost: CostParams
    epsilon: float = 1e-4

    @property
    def m(self) -> int:
        return len(self.quotes)

    @property
    def prices(self) -> np.ndarray:
        return np.array([quote.price for quote in self.quotes], dtype=float)

    def maturity_step(self, index: int) -> int:
        k = self.tgrid.step_index(self.quotes[index].maturity)
        if k is None:
            raise InputError(
                f"quote {index}: maturity {self.quotes[index].maturity} "
                "not on time grid"
            )
        return k

    @cached_property
    def quotes_by_step(self) -> Dict[int, List[int]]:
        """Quote indices grouped by the time node of their maturity."""
        grouped: Dict[int, List[int]] = {}
        for index in range(self.m):
            grouped.setdefault(self.maturity_step(index), []).append(index)
        return grouped

    @cached_property
    def payoff_matrix(self) -> np.ndarray:
        """G_i(Z) on the Z-nodes, shape (m, n_z)."""
        if not self.quotes:
            return np.zeros((0, self.grid.n_z))
        rows = [payoff_eval(quote, self.grid.z) for quote in self.quotes]
        matrix = np.vstack(rows)
        matrix.setflags(write=False)
        return matrix


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of validate_problem; an empty list means admissible input."""

    violations: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_if_invalid(self) -> None:
        if self.violations:
            raise InputError("invalid problem: " + "; ".join(self.violations))


def _quote_violations(
    index: int, quote: OptionQuote, grid: Grid2D, tgrid: TimeGrid
) -> List[str]:
    found = []
    label = f"quote {index}"
    if not 0.0 < quote.maturity <= tgrid.horizon:
        found.append(
            f"{label}: maturity {quote.maturity} outside (0, {tgrid.horizon}]"
        )
    elif tgrid.step_index(quote.maturity) is None:
        found.append(f"{label}: maturity not on time grid ({quote.maturity})")
    if not (math.isfinite(quote.price) and quote.price >= 0.0):
        found.append(f"{label}: price must be finite and nonnegative, got {quote.price}")
    if quote.kind in (PayoffKind.CALL, PayoffKind.PUT) and not quote.strike > 0:
        found.append(f"{label}: strike must be positive, got {quote.strike}")
    if quote.kind is PayoffKind.CUSTOM and not quote.table:
        found.append(f"{label}: custom payoff has an empty table")
    else:
        with np.errstate(all="ignore"):
            values = payoff_eval(quote, grid.z)
        if not np.all(np.isfinite(values)):
            found.append(f"{label}: payoff unbounded on the truncated domain")
    return found


def validate_problem(
    problem: CalibrationProblem, allow_empty: bool = False
) -> ValidationReport:
    """Collect every reason the problem is not admissible.

    Args:
        problem: The calibration problem.
        allow_empty: Accept an empty quote list (degenerate pure-reference run).

    Returns:
        Report listing the violations; never raises.
    """
    found: List[str] = []
    found.extend(problem.heston.violations())
    found.extend(problem.spot.violations())
    if not problem.epsilon > 0:
        found.append(f"epsilon must be positive, got {problem.epsilon}")
    if not problem.quotes and not allow_empty:
        found.append("no quotes")
    for index, quote in enumerate(problem.quotes):
        found.extend(_quote_violations(index, quote, problem.grid, problem.tgrid))
    return ValidationReport(violations=tuple(found))


def snap_maturities(
    quotes: Sequence[OptionQuote], tgrid: TimeGrid
) -> Tuple[OptionQuote, ...]:
    """Move each maturity to its nearest time node, logging the displacement."""
    snapped = []
    for quote in quotes:
        k = max(1, tgrid.nearest_step(quote.maturity))
        t_k = k * tgrid.dt
        if t_k != quote.maturity:
            logger.warning(
                "Snapped maturity %.6g to time node t_%d=%.6g (shift %.3e)",
                quote.maturity,
                k,
                t_k,
                t_k - quote.maturity,
            )
            quote = quote.with_maturity(t_k)
        snapped.append(quote)
    return tuple(snapped)
