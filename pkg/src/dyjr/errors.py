"""Exception hierarchy. The CLI maps each class to a process exit code."""


class DyJRError(Exception):
    exit_code = 1


class ConfigError(DyJRError, ValueError):
    exit_code = 2


class InputError(DyJRError, ValueError):
    """Malformed arguments handed to a pure function (usually a caller bug)."""

    exit_code = 2


class CapacityError(DyJRError):
    exit_code = 2


class NumericError(DyJRError, ArithmeticError):
    exit_code = 3


class StorageError(DyJRError, OSError):
    """Unreadable or corrupt checkpoint / log file."""

    exit_code = 4
