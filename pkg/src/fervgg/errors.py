"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code.
"""


class FerError(Exception):
    category = "internal"


class ShapeError(FerError, ValueError):
    category = "input"


class LabelError(FerError, ValueError):
    category = "input"


class ParseError(FerError, ValueError):
    category = "input"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(FerError, ValueError):
    category = "input"


class DegenerateBatchError(FerError, ValueError):
    category = "numeric"


class NumericError(FerError, ArithmeticError):
    category = "numeric"


class StateError(FerError, RuntimeError):
    category = "internal"


class RegistryError(FerError, KeyError):
    category = "internal"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ScheduleExhaustedError(FerError, IndexError):
    category = "config"


class CheckpointError(FerError, IOError):
    category = "input"


class ConfigError(FerError, ValueError):
    category = "config"
