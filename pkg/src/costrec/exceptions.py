"""Exception hierarchy; the CLI maps each class to an exit code."""


class CostrecError(Exception):
    exit_code = 1


class ConfigError(CostrecError, ValueError):
    exit_code = 1


class DataError(CostrecError, ValueError):
    exit_code = 2


class NumericError(CostrecError, ArithmeticError):
    exit_code = 3


class TrainingDivergedError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
