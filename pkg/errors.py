"""Exception types shared by the pipeline and the command line."""

EXIT_SUCCESS = 0
EXIT_USAGE_ERROR = 1
EXIT_DATA_ERROR = 2
EXIT_INVARIANT_VIOLATION = 3


class GraspabilityError(Exception):
    """Base class for every error raised by the annotation pipeline."""
    exit_code = EXIT_DATA_ERROR


class UsageError(GraspabilityError):
    exit_code = EXIT_USAGE_ERROR


class ConfigurationError(GraspabilityError):
    """Invalid camera, bin, robot or object pool configuration."""


class DataError(GraspabilityError):
    """Input data violates a precondition (dimensions, point counts, units)."""


class DegenerateFitError(DataError):
    """Plane fit on fewer than three or collinear points."""


class InvariantViolation(GraspabilityError):
    """Internal inconsistency that should be impossible for valid inputs."""
    exit_code = EXIT_INVARIANT_VIOLATION


class StageError(GraspabilityError):
    """A pipeline stage failed; keeps the stage name and the original error."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"{stage}: {cause}")

    @property
    def exit_code(self):
        return exit_code_for(self.cause)


def exit_code_for(exc):
    """Map an exception to the CLI exit code."""
    if isinstance(exc, GraspabilityError):
        return exc.exit_code
    if isinstance(exc, (OSError, ValueError)):
        return EXIT_DATA_ERROR
    return EXIT_INVARIANT_VIOLATION
