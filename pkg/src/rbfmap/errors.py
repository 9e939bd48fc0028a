"""Exception types shared across the package."""


class RbfMapError(Exception):
    """Base class for all package errors."""


class DimensionError(RbfMapError, ValueError):
    """Operand shapes do not compose."""


class ContractError(RbfMapError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(RbfMapError, ValueError):
    """Invalid model, training or experiment configuration."""


class DataError(RbfMapError):
    """Input data could not be read or is inconsistent."""


class FormatError(DataError):
    """A binary file (IDX, checkpoint) has an unexpected layout."""


class NumericalError(RbfMapError, ArithmeticError):
    """Non-finite values appeared during optimization."""
