"""Exceptions raised by ddmm, and the exit codes the CLI maps them to."""

from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


class DdmmError(Exception):
    """Base class for every error raised on purpose by this package."""


class ValidationError(DdmmError, ValueError):
    """An input was rejected: bad shape, out-of-range timestep, malformed file."""


class ConfigError(ValidationError):
    """A run configuration file could not be parsed or has unknown keys."""

    def __init__(self, message: str, lineno: Optional[int] = None) -> None:
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class CheckpointError(ValidationError):
    """A checkpoint is missing, truncated, or fails its integrity checksum."""


class NumericFailure(DdmmError, ArithmeticError):
    """A NaN/Inf showed up in a loss, a parameter, or a metric computation."""


def exit_code(error: BaseException) -> int:
    """Return the process exit code for an exception escaping a CLI command."""
    if isinstance(error, NumericFailure):
        return EXIT_NUMERIC
    return EXIT_VALIDATION
