class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class TrainingDivergedError(RuntimeError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt or inconsistent with its config."""


class ConfigError(ValueError):
    """A configuration document is malformed; ``key`` names the offender."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
