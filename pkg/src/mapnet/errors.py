"""Exception hierarchy shared by the library and the command line."""


class MapNetError(Exception):
    """Base class for all library errors."""


class ContractError(MapNetError, ValueError):
    """An input violated a documented shape or value contract."""


class ConfigurationError(MapNetError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(MapNetError):
    """Dataset files are missing, malformed or unusable."""


class UndefinedLossError(MapNetError, ArithmeticError):
    """A loss has no positive samples to average over."""


class NumericError(MapNetError, ArithmeticError):
    """Training produced a non-finite value."""
