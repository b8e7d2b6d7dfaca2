"""Exception hierarchy shared across the pipeline."""


class SkillSegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SkillSegError, ValueError):
    """Invalid hyperparameters, shapes or configuration documents."""


class UsageError(SkillSegError, ValueError):
    """An API was called with arguments that violate its preconditions."""


class DataError(SkillSegError, ValueError):
    """Malformed or inconsistent trajectory data."""

    def __init__(self, message, record=None):
        if record is not None:
            message = f"record {record}: {message}"
        super().__init__(message)
        self.record = record


class GenerationError(SkillSegError, RuntimeError):
    """The scripted demonstrator failed to complete a task."""


class TrainingError(SkillSegError, RuntimeError):
    """Non-finite loss or gradient during optimization."""


class AlignmentError(SkillSegError, RuntimeError):
    """A trajectory could not be force-aligned to its task program."""


class DependencyError(SkillSegError, RuntimeError):
    """A pipeline stage was run before the artifacts it consumes exist."""


class ProvenanceError(DependencyError):
    """Upstream artifacts were produced by a different config or seed."""


class StageError(SkillSegError, RuntimeError):
    """A pipeline stage failed; carries the stage name and its exit code."""

    def __init__(self, stage: str, exit_code: int, cause: Exception):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.exit_code = exit_code
        self.cause = cause
