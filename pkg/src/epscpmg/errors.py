"""Exception types raised across the package."""


class EpsCpmgError(Exception):
    """Base class for all package errors."""


class CapacityError(EpsCpmgError):
    """Requested Hilbert space exceeds the supported number of spins."""


class NumericalError(EpsCpmgError):
    """Non-finite values appeared during propagation or fitting."""

    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


class GeometryError(EpsCpmgError, ValueError):
    """Two spins sit closer than the exclusion radius."""


class SamplingError(EpsCpmgError):
    """Rejection sampling of positions did not terminate."""


class ContractError(EpsCpmgError, ValueError):
    """A documented precondition was violated by the caller."""


class FitError(EpsCpmgError):
    """A least-squares fit failed to converge or the input is degenerate."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class SchemaError(EpsCpmgError, ValueError):
    """Input file or configuration does not match the expected schema."""

    def __init__(self, message, problems=()):
        super().__init__(message)
        self.problems = list(problems)
