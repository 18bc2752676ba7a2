from __future__ import annotations

from typing import Optional


class GoregError(Exception):
    """Base class of every error the pipeline raises on purpose.

    `exit_code` is what the CLI returns when the error escapes a stage.
    """

    exit_code: int = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage


class UsageError(GoregError):
    exit_code = 2


class ConfigurationError(GoregError):
    exit_code = 3


class InputShapeError(GoregError):
    exit_code = 4


class ParseError(GoregError):
    exit_code = 4

    def __init__(self, message: str, line: Optional[int] = None, stage: Optional[str] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, stage=stage)
        self.line = line


class DataIntegrityError(GoregError):
    exit_code = 4


class DataError(GoregError):
    exit_code = 4


class DomainError(GoregError):
    exit_code = 4


class DegenerateInputError(GoregError):
    exit_code = 5
