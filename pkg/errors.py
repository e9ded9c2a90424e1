"""Exception hierarchy for the a-DCF back-end toolkit."""
from typing import Optional


class AdcfError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(AdcfError, ValueError):
    """An argument or value violates a documented invariant."""


class DataFormatError(ValidationError):
    """A trial or score file could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, line_no: Optional[int] = None):
        self.path = path
        self.line_no = line_no
        location = ""
        if path is not None:
            location = f"{path}"
            if line_no is not None:
                location += f":{line_no}"
            location += ": "
        elif line_no is not None:
            location = f"line {line_no}: "
        super().__init__(f"{location}{message}")


class CheckpointError(ValidationError):
    """A model checkpoint is malformed, from another format version, or has the wrong shape."""


class TrainingError(ValidationError):
    """Training preconditions are not met."""


class UsageError(AdcfError):
    """Command-line usage problem such as a missing input file."""


class RunIOError(AdcfError, OSError):
    """An output location could not be created or written."""
