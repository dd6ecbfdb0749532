"""Exception hierarchy shared across the package.

The CLI maps each family to a distinct process exit code.
"""


class SDMAEError(Exception):
    exit_code = 1


class DimensionError(SDMAEError, ValueError):
    """Array shapes do not fit the declared geometry."""

    exit_code = 2


class ParameterError(SDMAEError, ValueError):
    """A scalar argument is outside its admissible range."""

    exit_code = 2


class ConfigError(SDMAEError, ValueError):
    exit_code = 2


class ContractError(SDMAEError, ValueError):
    """An input violates a documented contract (e.g. non-stochastic rows)."""

    exit_code = 2


class DataError(SDMAEError, OSError):
    exit_code = 3


class NumericError(SDMAEError, FloatingPointError):
    exit_code = 4


class CheckpointError(SDMAEError):
    exit_code = 5


class CheckpointVersionError(CheckpointError):
    exit_code = 6


class CorruptCheckpointError(CheckpointError):
    exit_code = 7


class FingerprintMismatchError(CheckpointError):
    exit_code = 8
