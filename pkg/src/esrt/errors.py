"""Exception types raised across the package."""


class EsrtError(Exception):
    pass


class ShapeError(EsrtError, ValueError):
    pass


class ArgError(EsrtError, ValueError):
    pass


class ConfigError(EsrtError, ValueError):
    pass


class TapeError(EsrtError, RuntimeError):
    pass


class DataError(EsrtError, RuntimeError):
    pass
