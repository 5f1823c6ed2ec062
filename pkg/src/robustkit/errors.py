"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent for an operation or layer."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"loss became {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class EstimationError(RuntimeError):
    """Every probe of a robustness estimate failed."""


class DatasetError(ValueError):
    """Malformed dataset file or dataset unusable for the requested analysis."""


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
