"""Exception hierarchy shared across the package."""


class HoloMambaError(Exception):
    """Base class for all package errors."""


class DimensionError(HoloMambaError, ValueError):
    pass


class ConfigError(HoloMambaError, ValueError):
    pass


class DataError(HoloMambaError, ValueError):
    pass


class ContractError(HoloMambaError, ValueError):
    """A precondition of an operation was violated by the caller."""


class TrainingError(HoloMambaError, ArithmeticError):
    pass


class EmbeddingIndexError(HoloMambaError, IndexError):
    pass
