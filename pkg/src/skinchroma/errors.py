"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all pipeline errors."""


class SpaceMismatchError(PipelineError):
    """A patch arrived in the wrong color space for the requested transform."""


class ParameterError(PipelineError, ValueError):
    """A numeric parameter is outside its valid range."""


class RoiBoundsError(PipelineError, ValueError):
    """A region of interest is malformed or not contained in its parent image."""


class DegenerateSamplesError(PipelineError):
    """Calibration samples are too few or too degenerate to estimate from."""


class ConvergenceError(PipelineError):
    """An iterative estimator failed to converge."""

    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class RankError(PipelineError):
    """A least-squares system is rank deficient."""
