"""Exception types shared across the package."""


class VmfError(Exception):
    """Base class for all errors raised by vmfcal."""


class DomainError(VmfError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateDirectionError(DomainError):
    """A resultant vector has zero length, so it has no direction."""


class NumericalError(VmfError, ArithmeticError):
    """A numerical procedure failed (non-convergence, overflow, non-finite values)."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
