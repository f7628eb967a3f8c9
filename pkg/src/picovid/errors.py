"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: config -> 2, io -> 3, shape -> 4,
numeric -> 5.
"""


class PicovidError(Exception):
    """Base class for all package errors."""


class ConfigError(PicovidError):
    """Invalid or inconsistent configuration (unknown keys, bad values)."""


class IOFailure(PicovidError):
    """File missing, unreadable, corrupt, or unwritable."""


class ShapeError(PicovidError):
    """Tensor/sequence shape or extent mismatch."""


class NumericError(PicovidError):
    """Non-finite values or numerically invalid operands."""
