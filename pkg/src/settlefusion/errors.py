"""Exception types shared across the package.

Plain ``ValueError`` is used for ordinary argument validation; the classes
here mark failure modes that callers are expected to branch on.
"""


class NumericError(RuntimeError):
    """A numeric quantity became non-finite where finiteness is required."""


class CorruptCheckpointError(RuntimeError):
    """A checkpoint file failed structural validation (magic, shapes, size)."""


class TrainingFailure(RuntimeError):
    """Training diverged or produced a non-finite loss.

    ``iteration`` records the optimizer step at which the failure was seen.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DegenerateRangeError(ValueError):
    """A normalization channel has max == min and cannot be scaled."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. constant targets)."""
