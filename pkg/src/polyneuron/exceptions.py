"""Exception hierarchy.  Each class carries a stable ``code`` for the CLI."""


class PolyNeuronError(Exception):
    code = "error"
    exit_status = 1


class DomainError(PolyNeuronError, ValueError):
    code = "domain"


class SingularSystemError(PolyNeuronError, ArithmeticError):
    code = "singular_system"

    def __init__(self, message, unit=None, pair=None):
        super().__init__(message)
        self.unit = unit
        self.pair = pair


class ShapeError(PolyNeuronError, ValueError):
    code = "shape"


class UsageError(PolyNeuronError):
    code = "usage"
    exit_status = 2


class ConfigError(UsageError, ValueError):
    code = "config"


class StaleCacheError(PolyNeuronError, RuntimeError):
    code = "stale_cache"


class DataError(PolyNeuronError, OSError):
    code = "data"


class MagicNumberError(DataError):
    code = "bad_magic"


class TruncatedFileError(DataError):
    code = "truncated"


class CountMismatchError(DataError):
    code = "count_mismatch"


class FileSizeError(DataError):
    code = "bad_size"


class ChecksumError(DataError):
    code = "checksum"


class CheckpointError(PolyNeuronError):
    code = "checkpoint"


class NonFiniteLossError(PolyNeuronError, FloatingPointError):
    code = "non_finite"

    def __init__(self, message, step=None, layer=None):
        super().__init__(message)
        self.step = step
        self.layer = layer
