class HmletError(Exception):
    """Base class of all errors raised while preparing, training or analysing a model."""
    pass


class DatasetError(HmletError):
    """Some kind of problem with the interaction data."""
    pass


class ParseError(DatasetError):
    """A line of an edge-list file could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class EmptyDatasetError(DatasetError):
    """No interactions are left to work with."""
    pass


class ShapeError(HmletError, ValueError):
    """Operands of a matrix operation do not agree in shape."""
    pass


class ConsistencyError(HmletError):
    """A forward trace does not belong to the parameters it is differentiated against."""
    pass


class TrainingDivergedError(HmletError):
    """The training loss became NaN or infinite."""

    def __init__(self, epoch, batch, tau, loss):
        super().__init__(f"Training diverged in epoch {epoch}, batch {batch} (tau={tau:.6g}, loss={loss})")
        self.epoch = epoch
        self.batch = batch
        self.tau = tau
        self.loss = loss


class ConvergenceError(HmletError):
    """An iterative method exhausted its iteration budget."""
    pass


class CheckpointError(HmletError):
    """A checkpoint file is malformed or does not fit the dataset."""
    pass


class AnalysisError(HmletError):
    """The gate decisions cannot be classified."""
    pass
