class ContractError(ValueError):
    """An argument violates a shape, range or resolution contract."""


class ConfigError(ValueError):
    """A configuration cannot be built."""


class UndefinedMetricError(ValueError):
    """A saliency metric is undefined for the given maps (constant, empty, zero mass)."""


class AdapterUnavailableError(RuntimeError):
    """Pretrained encoder weights are missing or unreadable."""


class CorruptCheckpointError(ValueError):
    pass


class CheckpointVersionError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss
