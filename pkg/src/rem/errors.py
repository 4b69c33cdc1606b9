"""Exception hierarchy shared by all rem modules.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericalError -> 3.
"""


class RemError(Exception):
    """Base class for all rem errors."""


class ValidationError(RemError):
    """Malformed input, bad configuration, or violated precondition."""


class NumericalError(RemError):
    """Non-finite values or other numerical breakdown during computation."""


class EmptyFootprintError(ValidationError):
    """A box footprint contains no feature-map cell centers."""
