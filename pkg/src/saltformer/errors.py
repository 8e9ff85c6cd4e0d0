"""Exception hierarchy shared by every module."""


class SaltError(Exception):
    """Base class for all errors raised by saltformer."""


class DimensionError(SaltError, ValueError):
    """Tensor shapes or extents do not agree."""


class ConfigError(SaltError, ValueError):
    """An architecture, partition or schedule setting is invalid."""


class DataError(SaltError, ValueError):
    """Input data is malformed or degenerate."""


class ContractError(SaltError, RuntimeError):
    """A call violates an operation's precondition."""


class NonFiniteError(SaltError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class MetricError(SaltError, ValueError):
    """A metric is undefined for the given scores/labels."""


class TrainingError(SaltError, RuntimeError):
    """Training diverged."""


class CheckpointError(SaltError, ValueError):
    """A checkpoint is corrupt or does not match the requested config."""
