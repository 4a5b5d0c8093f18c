"""
Exception types raised by the solver and verifier modules
"""

from typing import Optional, Sequence


class QPError(Exception):
    """Base class for every error raised by this package"""


class ExpressionSyntaxError(QPError, ValueError):
    """Malformed expression text"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExpressionSyntaxError):
    """Identifier that is neither a declared variable nor a known function"""


class ArityError(ExpressionSyntaxError):
    """Function called with the wrong number of arguments"""


class ExpressionDomainError(QPError, ArithmeticError):
    """log/sqrt/division outside its domain"""

    def __init__(self, message: str, point: Optional[dict] = None):
        if point:
            where = ", ".join(f"{name}={value:.17g}" for name, value in point.items())
            message = f"{message} at ({where})"
        super().__init__(message)
        self.point = point or {}


class MalformedFieldError(QPError, ValueError):
    """Fourier coefficients that do not describe a real field"""


class BandwidthError(QPError, ValueError):
    """Grid too coarse for the requested truncation"""


class AliasingError(QPError, RuntimeError):
    """Quadrature did not settle under grid refinement"""


class GeometryError(QPError, ArithmeticError):
    """Singular or indefinite metric, failed factorization"""


class DegenerateSpanError(GeometryError):
    """Two tangent vectors do not span a plane"""


class IntegrationError(QPError, RuntimeError):
    """ODE integrator gave up"""


class NoConnectionError(QPError, RuntimeError):
    """Connecting-map boundary value problem did not converge"""


class DomainViolationError(QPError, ValueError):
    """Path or field left the sublevel region"""


class ChartDomainError(QPError, ValueError):
    """Field or trajectory left the chart box"""

    def __init__(self, message: str, where: Optional[Sequence[float]] = None):
        if where is not None:
            message = f"{message} at {[float(w) for w in where]}"
        super().__init__(message)
        self.where = where


class BarrierInfeasibleError(QPError, ValueError):
    """Starting point of the barrier method is outside the sublevel region"""


class FrameDriftError(QPError, RuntimeError):
    """Interpolated transported frame lost orthonormality; transport again with finer nodes"""


class ProblemFileError(QPError, ValueError):
    """Problem file could not be read or validated"""
