"""Convex penalty on the diffusion coefficient and its closed-form conjugate.

For a reference value x_bar and a floor s < x_bar, with y = (x - s)/(x_bar - s),

    H(x; x_bar, s) = a y^(1+p) + b y^(1-p) + c      if x > s and x_bar > s
                   = +inf                           otherwise.

The coefficients are fixed by H(x_bar) = 0 and H'(x_bar) = 0, leaving the
overall scale a free. The supremum sup_x {x q - H(x)} is attained where
H'(x) = q, which reduces to the quadratic u^2 - Q u - 1 = 0 in u = y^p.

All functions broadcast over numpy arrays. Nodes with x_bar == s are
degenerate: the band collapses, the argmax is pinned to x_bar and the
conjugate value is x_bar q. This covers the V = 0 row (both are 0 there) and
every row of a unit correlation, where eta_bar^2 V == V.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np

from lsv_calibrator.core.errors import InputError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class CostParams:
    """Coefficients of H. Build with cost_coefficients()."""

    p: float = 4.0
    a: float = 1.0
    b: float = 5.0 / 3.0
    c: float = -8.0 / 3.0
    scale: float = 1.0


@dataclass(frozen=True)
class CostConfig:
    """User-facing cost settings."""

    p: float = 4.0
    scale: float = 1.0

    def params(self) -> CostParams:
        return cost_coefficients(self.p, self.scale)


def cost_coefficients(p: float, scale: float = 1.0) -> CostParams:
    """Solve for (a, b, c) given the exponent and the free scale.

    Args:
        p: Exponent, must exceed 1.
        scale: Multiplicative scale, becomes a.

    Returns:
        Coefficients with a = scale, b = a(1+p)/(p-1), c = -(a+b).

    Raises:
        InputError: If p <= 1 or scale <= 0.
    """
    if not p > 1.0:
        raise InputError(f"cost exponent must exceed 1, got p={p}")
    if not scale > 0.0:
        raise InputError(f"cost scale must be positive, got {scale}")
    a = float(scale)
    b = a * (1.0 + p) / (p - 1.0)
    return CostParams(p=float(p), a=a, b=b, c=-(a + b), scale=float(scale))


def _band(x_bar: ArrayLike, s: ArrayLike) -> np.ndarray:
    return np.asarray(x_bar, dtype=float) - np.asarray(s, dtype=float)


def cost_value(
    x: ArrayLike, x_bar: ArrayLike, s: ArrayLike, cp: CostParams
) -> np.ndarray:
    """H(x; x_bar, s), +inf outside the domain x > s, x_bar > s."""
    x, x_bar, s = np.broadcast_arrays(
        np.asarray(x, dtype=float),
        np.asarray(x_bar, dtype=float),
        np.asarray(s, dtype=float),
    )
    inside = (x > s) & (x_bar > s)
    out = np.full(x.shape, np.inf)
    if np.any(inside):
        log_y = np.log((x[inside] - s[inside]) / (x_bar[inside] - s[inside]))
        # written around y = 1 so that H(x_bar) is exactly zero
        out[inside] = cp.a * np.expm1((1.0 + cp.p) * log_y) + cp.b * np.expm1(
            (1.0 - cp.p) * log_y
        )
    return out


def cost_derivative(
    x: ArrayLike, x_bar: ArrayLike, s: ArrayLike, cp: CostParams
) -> np.ndarray:
    """dH/dx = a(1+p)(y^p - y^-p)/(x_bar - s).

    Raises:
        InputError: If any point lies outside x > s, x_bar > s.
    """
    x, x_bar, s = np.broadcast_arrays(
        np.asarray(x, dtype=float),
        np.asarray(x_bar, dtype=float),
        np.asarray(s, dtype=float),
    )
    if not np.all((x > s) & (x_bar > s)):
        raise InputError("cost_derivative evaluated outside x > s, x_bar > s")
    band = x_bar - s
    y = (x - s) / band
    return cp.a * (1.0 + cp.p) * (y**cp.p - y ** (-cp.p)) / band


def conjugate_argmax(
    q: ArrayLike, x_bar: ArrayLike, s: ArrayLike, cp: CostParams
) -> np.ndarray:
    """The unique x > s with H'(x) = q, i.e. argmax_x {x q - H(x)}.

    Args:
        q: Dual slope (the coefficient multiplying x in the supremum).
        x_bar: Reference value (V in the calibration).
        s: Floor (eta_bar^2 V in the calibration).
        cp: Cost coefficients.

    Returns:
        Optimal x; equals x_bar where q == 0 and on degenerate nodes.

    Raises:
        InputError: If q is not finite.
    """
    q, x_bar, s = np.broadcast_arrays(
        np.asarray(q, dtype=float),
        np.asarray(x_bar, dtype=float),
        np.asarray(s, dtype=float),
    )
    if not np.all(np.isfinite(q)):
        raise InputError("conjugate slope must be finite")
    band = x_bar - s
    live = band > 0
    out = np.array(x_bar, dtype=float)
    if np.any(live):
        big_q = q[live] * band[live] / (cp.a * (1.0 + cp.p))
        root = np.sqrt(big_q * big_q + 4.0)
        # larger root of u^2 - Q u - 1, without cancellation for Q < 0
        u = np.where(big_q >= 0.0, 0.5 * (big_q + root), 2.0 / (root - big_q))
        out[live] = x_bar[live] + np.expm1(np.log(u) / cp.p) * band[live]
    return out


def conjugate_value(
    q: ArrayLike, x_bar: ArrayLike, s: ArrayLike, cp: CostParams
) -> np.ndarray:
    """sup_x {x q - H(x)}, x_bar q on degenerate nodes."""
    q, x_bar, s = np.broadcast_arrays(
        np.asarray(q, dtype=float),
        np.asarray(x_bar, dtype=float),
        np.asarray(s, dtype=float),
    )
    x_star = conjugate_argmax(q, x_bar, s, cp)
    live = (x_bar - s) > 0
    out = x_bar * q
    if np.any(live):
        out[live] = x_star[live] * q[live] - cost_value(
            x_star[live], x_bar[live], s[live], cp
        )
    return out
