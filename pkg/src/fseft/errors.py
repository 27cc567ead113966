"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidShape(ValueError):
    pass


class InvalidOrientation(ValueError):
    pass


class SpecInfeasible(ValueError):
    """Raised when a phantom/organ specification cannot be realised on its grid."""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, wrong types, or incompatible settings."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, message, *, lr=None, batch_ids=None, epoch=None):
        super().__init__(message)
        self.lr = lr
        self.batch_ids = batch_ids
        self.epoch = epoch
