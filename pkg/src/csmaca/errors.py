"""Exception types shared across the package."""


class CsmaError(Exception):
    """Base class for all package errors."""


class DimensionError(CsmaError, ValueError):
    """A vector does not have the length implied by the conflict graph."""


class DomainError(CsmaError, ValueError):
    """An argument lies outside its admissible range."""


class CapacityError(CsmaError):
    """An exhaustive enumeration would exceed its configured cap."""

    def __init__(self, what, size, cap):
        super().__init__(f"{what} = {size} exceeds cap {cap}")
        self.size = size
        self.cap = cap


class ConfigError(CsmaError, ValueError):
    """A configuration file or object failed validation."""


class PreconditionError(CsmaError, ValueError):
    """An operation was called on an input its contract does not accept."""


class SolverError(CsmaError):
    """A numerical solver failed; ``certificate`` carries diagnostic data."""

    def __init__(self, msg, certificate=None):
        super().__init__(msg)
        self.certificate = certificate


class NonConvergenceError(SolverError):
    """Iteration limit reached; ``best`` holds the best iterate found."""

    def __init__(self, msg, best=None, residual=None):
        super().__init__(msg, certificate={"residual": residual})
        self.best = best
        self.residual = residual
