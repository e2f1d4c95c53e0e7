"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class GTRError(Exception):
    exit_code = 1


class ConfigError(GTRError):
    exit_code = 2


class DataError(GTRError):
    exit_code = 3


class OrderingError(DataError):
    pass


class NumericError(GTRError):
    exit_code = 4


class DimensionError(NumericError, ValueError):
    pass


class ManifoldError(NumericError):
    """Point off the hyperboloid, or a log-map argument outside its domain."""


class TrainingError(NumericError):
    pass


class StorageError(GTRError):
    exit_code = 5
