"""Shared exception types.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class ConfigError(ValueError):
    """Bad or unknown configuration keys/values."""


class DataError(ValueError):
    """Malformed, missing, or inconsistent input data."""


class ParseError(DataError):
    """File could not be parsed; message names the offending row."""


class ValidationError(DataError):
    """Parsed values violate a domain invariant (negative density, NaN, ...)."""


class ShapeError(DataError):
    """Declared and actual array shapes disagree."""


class LineageError(DataError):
    """Artifact hash does not match the manifest that claims to have produced it."""


class InsufficientDataError(DataError):
    """Not enough usable samples/bins for the requested fit."""


class NumericalError(RuntimeError):
    """Numerical failure (divergence, non-convergence, undefined ratio)."""


class ConvergenceError(NumericalError):
    """Optimizer failed to converge; carries the best point seen so far."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
