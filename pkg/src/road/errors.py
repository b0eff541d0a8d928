"""Error taxonomy shared across the package."""


class RoadError(Exception):
    """Base class for all library errors."""


class ShapeError(RoadError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(RoadError, ValueError):
    """An operation parameter (stride, dilation, ...) is out of range."""


class ConfigError(RoadError, ValueError):
    """A configuration value violates its contract."""


class ContractError(RoadError, RuntimeError):
    """A caller violated an API precondition."""


class ValidationError(RoadError, ValueError):
    """Data failed an integrity or range check."""


class TrainingDiverged(RoadError, RuntimeError):
    """Training produced a non-finite loss; carries the diagnostic path."""

    def __init__(self, message: str, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
