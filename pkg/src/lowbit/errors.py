"""Exception types shared across the toolkit.

The CLI maps these onto exit codes; library callers can catch the base
class to distinguish toolkit failures from programming errors.
"""


class LowbitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(LowbitError):
    """Operands have incompatible shapes."""


class ContractError(LowbitError):
    """An argument violates a documented precondition."""


class PackError(LowbitError):
    """Bit-packing input is out of range or a payload is corrupt."""


class InfeasibleError(LowbitError):
    """No bit assignment satisfies the budget constraint."""


class NumericError(LowbitError):
    """A non-finite value appeared where the pipeline requires finite math."""


class IngestionError(LowbitError):
    """Calibration or input data could not be read as declared."""


class SizeError(LowbitError):
    """Problem instance exceeds a solver's configured size limit."""


class ConfigError(LowbitError):
    """Run configuration is missing, malformed, or inconsistent."""
