"""Exception types shared across the toolkit."""


class MmasrError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MmasrError):
    """Tensor extents incompatible with the requested operation."""


class TapeError(MmasrError):
    """Gradient tape used outside its forward/backward lifecycle."""


class NumericsError(MmasrError):
    """Non-finite value produced where finite math was required."""


class ConfigError(MmasrError):
    """Invalid or unknown experiment configuration."""


class DataError(MmasrError):
    """Manifest, audio, image, or tensor-file level problem."""


class CheckpointError(MmasrError):
    """Checkpoint missing, malformed, or inconsistent with the model."""


class UndefinedMetricError(MmasrError):
    """Metric has no value for the given inputs (e.g. zero reference words)."""
