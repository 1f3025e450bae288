"""Exception types shared across the package."""


class MMFuseError(Exception):
    pass


class DimensionError(MMFuseError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class BoundsError(MMFuseError, IndexError):
    pass


class NumericError(MMFuseError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(MMFuseError, RuntimeError):
    """An API was called in a state its contract forbids."""


class ConfigurationError(MMFuseError, ValueError):
    pass


class IngestionError(MMFuseError, IOError):
    """A dataset sample could not be read or encoded."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id
