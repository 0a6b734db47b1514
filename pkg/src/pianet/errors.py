"""Exception hierarchy shared by every pipeline stage.

Each class carries the CLI exit code it maps to.
"""


class PianetError(Exception):
    exit_code = 1
    code = "ERROR"


class ConfigError(PianetError, ValueError):
    """Invalid configuration, shapes or arguments."""

    exit_code = 2
    code = "CONFIG_ERROR"


class DataError(PianetError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3
    code = "DATA_ERROR"


class CheckpointError(DataError):
    code = "CHECKPOINT_ERROR"


class GenerationError(DataError):
    code = "GENERATION_ERROR"


class NumericError(PianetError, ArithmeticError):
    """Non-finite values appeared during computation."""

    exit_code = 4
    code = "NUMERIC_ERROR"


class PianetIOError(PianetError, OSError):
    exit_code = 5
    code = "IO_ERROR"
