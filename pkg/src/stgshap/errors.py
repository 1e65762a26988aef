"""Exception hierarchy.

The CLI maps each family onto a distinct exit code, so every error raised by
the library derives from one of the four category bases below.
"""


class StgshapError(Exception):
    """Base class for all library errors."""


class ConfigError(StgshapError):
    """Invalid run configuration or invalid user-supplied argument."""


class DataError(StgshapError):
    """Problems with input data (schema, emptiness, shape)."""


class NumericalError(StgshapError):
    """Numerical failure: divergence, non-convergence, singular systems."""


class StorageError(StgshapError, OSError):
    """File-system failure while reading or writing artifacts."""


class InvalidDimensionError(DataError, ValueError):
    pass


class InvalidArgumentError(ConfigError, ValueError):
    pass


class ContractViolationError(DataError, ValueError):
    pass


class TooLargeError(ConfigError, ValueError):
    pass


class EmptyDataError(DataError, ValueError):
    pass


class SchemaError(DataError, ValueError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, estimate: float):
        super().__init__(message)
        self.estimate = estimate


class DivergenceError(NumericalError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class SingularSystemError(NumericalError):
    def __init__(self, message: str, condition_number: float):
        super().__init__(message)
        self.condition_number = condition_number


class EvaluationError(NumericalError):
    def __init__(self, message: str, coalition_id: int):
        super().__init__(message)
        self.coalition_id = coalition_id
