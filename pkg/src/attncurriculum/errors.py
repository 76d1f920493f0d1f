class CurriculumError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""


class DataError(CurriculumError, ValueError):
    """Bad input data, bad artifact file, or an artifact that does not match."""


class RunFailure(CurriculumError, RuntimeError):
    """A computation that started but could not finish (e.g. non-finite loss)."""
