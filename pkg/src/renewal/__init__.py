"""Solvers and verification tools for the N-times renewal equation."""
from .errors import (
    ArgumentError,
    ConfigError,
    DomainError,
    InternalError,
    PreconditionError,
    RangeError,
    RenewalError,
    SizeError,
    SpecContractError,
    UnsupportedError,
)
from .model import (
    RateSpec,
    clamped_affine_rate,
    clamped_lipschitz_rate,
    constant_rate,
    eval_rate,
    geometric_constant_rate,
    lipschitz_params,
    tail_norm,
    uniform_limit_diagnostic,
)

__version__ = "0.1.0"
