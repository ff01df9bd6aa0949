"""Exception hierarchy. The CLI maps each family onto an exit code."""


class EchoAuthError(Exception):
    exit_code = 1


class ConfigError(EchoAuthError, ValueError):
    exit_code = 2


class DataError(EchoAuthError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Binary file is corrupt, truncated or of an unknown version."""


class SyncError(DataError):
    """No stable direct path could be located in a recording."""


class UndefinedMetricError(DataError, ZeroDivisionError):
    pass


class LeakageError(EchoAuthError, AssertionError):
    """Train and test splits share a session."""

    exit_code = 4
