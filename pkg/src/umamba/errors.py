"""Exception types; each carries the CLI exit code it maps to."""


class UmambaError(Exception):
    exit_code = 1


class ConfigError(UmambaError, ValueError):
    exit_code = 2


class DataError(UmambaError, ValueError):
    exit_code = 3


class DivergenceError(UmambaError, FloatingPointError):
    exit_code = 4
