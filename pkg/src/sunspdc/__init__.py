"""Simulation and analysis of a sunlight-pumped SPDC polarization-entanglement experiment.

The package covers the whole closed loop: a source model producing the
two-photon density matrix, an event-level detector time-tag simulator, a
coincidence correlator, maximum-likelihood state tomography and the CHSH
Bell test.
"""

from sunspdc.errors import (
    ConfigError,
    DegenerateBasisError,
    InsufficientDataError,
    InvalidArgumentError,
    OutOfDomainError,
    ParseError,
    PreconditionViolation,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateBasisError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "OutOfDomainError",
    "ParseError",
    "PreconditionViolation",
]
