# Copyright © 2024 MoPD Lab Contributors.

from typing import Any, Optional


class ConfigError(ValueError):
    """A config, spec or artifact file failed to parse or validate.

    ``field`` names the offending entry; ``line`` and ``column`` are set for
    JSON syntax errors.
    """

    def __init__(
        self,
        message: str,
        field: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        location = ""
        if line is not None:
            location = f" (line {line}, column {column})"
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message + location)
        self.field = field
        self.line = line
        self.column = column


class ArtifactMismatch(ValueError):
    """Two artifacts that must belong together carry different hashes."""


class NumericalAbort(RuntimeError):
    """Training produced a non-finite or exploding loss component."""

    def __init__(
        self,
        message: str,
        step: int,
        breakdown: Any = None,
        dump_path: Optional[str] = None,
    ):
        if dump_path is not None:
            message = f"{message} Diagnostic state written to {dump_path}."
        super().__init__(message)
        self.step = step
        self.breakdown = breakdown
        self.dump_path = dump_path
