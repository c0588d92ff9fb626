"""Exception hierarchy. CLI exit codes key off the base classes."""


class WSSSError(Exception):
    exit_code = 1


class ConfigError(WSSSError, ValueError):
    exit_code = 1


class DataError(WSSSError):
    exit_code = 2


class ManifestError(DataError):
    pass


class LoadError(DataError):
    pass


class LabelError(DataError, ValueError):
    pass


class CacheError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ExportError(DataError):
    pass


class DimensionError(WSSSError, ValueError):
    exit_code = 2


class MetricError(WSSSError, ValueError):
    exit_code = 2


class NumericError(WSSSError, ArithmeticError):
    exit_code = 3
