"""Exception types shared across the package."""


class ObjqaError(Exception):
    """Base class for every error raised by objqa."""


class DimensionError(ObjqaError, ValueError):
    pass


class DegenerateVectorError(ObjqaError, ValueError):
    pass


class ContractError(ObjqaError, ValueError):
    pass


class ParameterError(ObjqaError, ValueError):
    pass


class FormatError(ObjqaError, ValueError):
    pass


class ConsistencyError(ObjqaError, ValueError):
    pass


class ConfigError(ObjqaError, ValueError):
    pass


class UndefinedCorrelationError(ObjqaError, ValueError):
    pass
