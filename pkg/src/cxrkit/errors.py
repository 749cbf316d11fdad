"""Exception types shared across the toolkit."""


class FormatError(ValueError):
    """A file (image, annotation CSV, prediction CSV, index sidecar) is malformed."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    Carries the last residual so callers can report how far off the solve was.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ScheduleError(RuntimeError):
    """A training-schedule callback failed; ``trace`` holds the phases already run."""

    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = trace
