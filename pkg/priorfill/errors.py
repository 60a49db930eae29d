"""Exception hierarchy shared by every stage."""

from typing import Optional


class PriorFillError(Exception):
    """Base exception for priorfill errors."""

    pass


class ConfigurationError(PriorFillError):
    """Raised when a configuration value or input dimension is invalid."""

    pass


class ShapeMismatchError(PriorFillError, ValueError):
    """Raised when paired arrays do not share a shape."""

    pass


class MaskGenerationError(PriorFillError):
    """Raised when a mask within the ratio bounds could not be generated."""

    pass


class MAEError(PriorFillError):
    """Raised when the masked auto-encoder receives an unusable patch mask."""

    pass


class NonFiniteError(PriorFillError):
    """Raised when a tensor that must be finite contains NaN or inf."""

    pass


class TrainingDivergedError(PriorFillError):
    """Raised when a training loss becomes non-finite."""

    def __init__(self, stage: str, step: int, last_loss: Optional[float], lr: float):
        self.stage = stage
        self.step = step
        self.last_loss = last_loss
        self.lr = lr
        last = f"{last_loss:.6g}" if last_loss is not None else "n/a"
        super().__init__(f"{stage} training diverged at step {step} (last finite loss {last}, lr {lr:.3g})")


class FrozenParameterError(PriorFillError):
    """Raised when a frozen module receives a gradient or its parameters change."""

    pass


class CheckpointError(PriorFillError):
    """Raised when a checkpoint cannot be read, written or verified."""

    pass


class DependencyError(PriorFillError):
    """Raised when a stage runs before the stage it depends on."""

    def __init__(self, stage: str, required: str, detail: str = ""):
        self.stage = stage
        self.required = required
        message = f"Stage '{stage}' requires stage '{required}' to run first"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class ClusteringError(PriorFillError):
    """Raised when clustering cannot produce the requested number of clusters."""

    pass


class CurationError(PriorFillError):
    """Raised when an evaluation set cannot be built."""

    pass


class MetricError(PriorFillError):
    """Raised when a metric cannot be computed from its inputs."""

    pass
