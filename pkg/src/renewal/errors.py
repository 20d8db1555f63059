"""Exception hierarchy shared by all modules."""


class RenewalError(Exception):
    """Base class for library errors."""


class DomainError(RenewalError, ValueError):
    """Point or parameter outside the admissible domain."""


class RangeError(RenewalError, IndexError):
    """Index beyond what a finite rate spec covers."""


class ArgumentError(RenewalError, ValueError):
    """Inconsistent call arguments (bad K, mismatched grids, ...)."""


class UnsupportedError(RenewalError, NotImplementedError):
    """Operation needs structure the object does not provide."""


class ConfigError(RenewalError, ValueError):
    """Invalid solver or experiment configuration."""


class SpecContractError(RenewalError):
    """A rate spec violates its declared bounds."""


class SizeError(RenewalError, ValueError):
    """Problem too large for an exact solver."""


class PreconditionError(RenewalError, ValueError):
    """Hypotheses of a requested experiment are not met (e.g. inadmissible cost parameters)."""


class InternalError(RenewalError, ArithmeticError):
    """Numerical guard tripped; should not happen for valid inputs."""
