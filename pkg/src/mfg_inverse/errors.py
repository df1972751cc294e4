"""Exception types shared across the package.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented exit codes without inspecting messages.
"""
from __future__ import annotations


class MfgInverseError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(MfgInverseError):
    """Invalid configuration, parameters, or domain/grid mismatch."""

    exit_code = 1


class GridMismatchError(ConfigError):
    """A field was used with a region or grid it does not live on."""


class CapabilityError(ConfigError):
    """Requested feature outside the supported envelope (e.g. order > 4)."""


class RangeError(ConfigError):
    """A computation would overflow in unfactored arithmetic."""


class SolverError(MfgInverseError):
    """Iterative or direct solver failed to reach its tolerance."""

    exit_code = 2

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class ProbeError(MfgInverseError):
    """Probe construction failed (e.g. observed contraction factor >= 1)."""

    exit_code = 3


class VerificationError(MfgInverseError):
    """A certification suite or invariant check failed."""

    exit_code = 4


class IllConditionedError(MfgInverseError):
    """Reconstruction weight or design matrix too poorly conditioned."""

    exit_code = 4


class DataError(MfgInverseError):
    """Missing or inconsistent measurement data."""

    exit_code = 5
