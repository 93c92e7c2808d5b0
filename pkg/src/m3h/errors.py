"""Exception hierarchy shared by every m3h module."""


class M3HError(Exception):
    """Base class for all errors raised by m3h."""


class DimensionError(M3HError, ValueError):
    pass


class DomainError(M3HError, ValueError):
    pass


class ContractError(M3HError, ValueError):
    pass


class FormatError(M3HError, ValueError):
    pass


class NumericError(M3HError, ArithmeticError):
    pass


class CapacityError(M3HError, ValueError):
    pass


class ConfigError(M3HError, ValueError):
    """Bad user configuration; the CLI maps this to exit status 2."""


class LabelIndexError(M3HError, IndexError):
    pass
