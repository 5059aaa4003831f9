class StructuralError(ValueError):
    """Array shapes or dimensions do not agree."""


class NumericError(ValueError):
    """Input contains NaN or infinite values where finite ones are required."""


class CapacityError(ValueError):
    """A dense materialization would exceed the configured size limit."""


class StateError(RuntimeError):
    """Operation is not valid in the current state of the object."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training.

    ``batch`` holds the last minibatch (contexts, targets) for inspection.
    """

    def __init__(self, message, step=None, batch=None):
        super().__init__(message)
        self.step = step
        self.batch = batch
