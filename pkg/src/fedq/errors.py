"""Exception types shared across the simulator."""


class FedqError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateRange(FedqError):
    """Quantization range narrower than the supported epsilon."""


class DimensionMismatch(FedqError):
    """Operands have incompatible dimensions."""


class ShapeMismatch(DimensionMismatch):
    """Model layer shapes disagree."""


class StateMismatch(FedqError):
    """Forward/backward state does not match the supplied batch."""


class NotSymmetric(FedqError):
    """Matrix is not symmetric within tolerance."""


class NoConvergence(FedqError):
    """Iterative solver failed to converge."""


class NegativeEigenvalue(FedqError):
    """A selected eigenvalue is negative beyond tolerance."""


class ZeroMatrix(FedqError):
    """Matrix has no nonzero rows."""


class InvalidParams(FedqError):
    """Parameter values violate a documented precondition."""


class InvalidCoordinate(InvalidParams):
    """Coordinate index out of range."""


class EmptyInput(FedqError):
    """Operation requires at least one element."""


class MissingClient(FedqError):
    """A round ran without full client participation."""


class ParseError(FedqError):
    """Configuration file could not be parsed."""


class ValidationError(FedqError):
    """Configuration violates an invariant; message names the field."""
