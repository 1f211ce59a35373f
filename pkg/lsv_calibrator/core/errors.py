"""Exception hierarchy shared by the solvers, file readers and front ends."""


class CalibrationError(Exception):
    """Base class for every error raised by lsv_calibrator."""


class InputError(CalibrationError, ValueError):
    """Invalid problem data, configuration or input file."""


class NumericalError(CalibrationError, ArithmeticError):
    """A solver hit a singular system or broke one of its invariants."""


class PricingError(NumericalError):
    """Reference pricing failed (quadrature did not converge, price out of bounds)."""
