"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(RuntimeError):
    """Unusable dataset content: missing folders, undecodable images, bad labels."""


class MetricError(ValueError):
    """A metric is undefined for the given predictions."""


class CheckpointError(IOError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
