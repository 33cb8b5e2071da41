"""Exception hierarchy shared across the package."""


class PneumonetError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(PneumonetError):
    """Tensor or image dimensions violate an op's contract."""


class AutodiffError(PneumonetError):
    """Backward-pass misuse: non-scalar loss, reused tape, stale grads."""


class ConfigError(PneumonetError):
    """A run configuration key or value is malformed or unknown."""


class DataError(PneumonetError):
    """A manifest row, image file, or mask violates its contract."""


class CheckpointError(PneumonetError):
    """A checkpoint file is missing, corrupt, or structurally wrong."""


class TransferError(PneumonetError):
    """Encoder weight transfer hit a shape-incompatible tensor."""


class MetricError(PneumonetError):
    """A metric or percentage is undefined for the given inputs."""


class NumericError(PneumonetError):
    """Training or inference produced NaN or diverged."""
