"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes, so every failure raised by
library code should be one of these types.
"""


class FinSentError(Exception):
    """Base class for all library errors."""


class ConfigError(FinSentError, ValueError):
    """Invalid configuration or hyperparameter."""


class DimensionError(FinSentError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FinSentError, ValueError):
    """A call violated an operation precondition."""


class ModeError(FinSentError, RuntimeError):
    """Operation not available for the model's configured task head."""


class NumericalError(FinSentError, FloatingPointError):
    """A non-finite value appeared where finite values are required."""


class DataError(FinSentError, ValueError):
    """Malformed or insufficient input data.

    ``line`` is the 1-based line number of the offending record when known.
    """

    def __init__(self, message, line=None, path=None):
        prefix = ""
        if path is not None:
            prefix += f"{path}:"
        if line is not None:
            prefix += f"{line}: "
        elif prefix:
            prefix += " "
        super().__init__(prefix + message)
        self.line = line
        self.path = path


class CheckpointError(FinSentError, IOError):
    """Checkpoint file is corrupt, truncated or of an unknown version."""
