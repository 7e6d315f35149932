"""Exception hierarchy. The CLI maps these onto exit codes."""


class DTCNError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(DTCNError, ValueError):
    pass


class ContractError(DTCNError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(DTCNError, ValueError):
    pass


class DataError(DTCNError, ValueError):
    pass


class NumericError(DTCNError, FloatingPointError):
    """An operation produced NaN or Inf."""


class CheckpointError(DTCNError):
    pass
