"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see ``stepedit.harness.cli``).
"""


class StepEditError(Exception):
    """Base class for all package errors."""


class ShapeError(StepEditError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(StepEditError, ValueError):
    """A documented precondition was violated by the caller."""


class InputError(ContractError):
    """User-facing input (tokens, files, flags) is malformed."""


class ConfigError(ContractError):
    """Configuration values are inconsistent or out of range."""


class CapacityError(StepEditError, ValueError):
    """Not enough vocabulary or samples to satisfy a request."""


class NumericError(StepEditError, ArithmeticError):
    """A computation produced or consumed non-finite values."""


class PreconditionError(StepEditError):
    """An experiment precondition check failed (e.g. base-model specificity)."""


class CheckpointError(StepEditError, IOError):
    """A checkpoint could not be read, or its schema version is incompatible."""
