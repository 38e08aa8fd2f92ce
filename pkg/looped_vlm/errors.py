"""
Custom exceptions for looped_vlm.
"""

from typing import Any, Dict, Optional


class LoopedVLMError(Exception):
    """Base exception for all looped_vlm errors."""
    exit_code = 1


class ConfigError(LoopedVLMError):
    """Raised when a run configuration or CLI invocation is invalid."""
    exit_code = 2

    def __init__(self, message: str, issues: Optional[list] = None):
        super().__init__(message)
        self.issues = list(issues or [])


class DataError(LoopedVLMError):
    """Raised when input data, datasets or files on disk are unusable."""
    exit_code = 3


class CheckpointError(DataError):
    """Raised when a checkpoint is missing, corrupt or incompatible."""
    pass


class NumericError(LoopedVLMError):
    """Raised on numeric failures (NaN inputs, non-finite activations)."""
    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ShapeError(NumericError, ValueError):
    """Raised when array extents violate an operation's contract."""
    pass


def exit_code_for(error: BaseException) -> int:
    """
    Map an exception to the CLI exit code.

    Args:
        error: The exception raised by a command

    Returns:
        2 for config errors, 3 for data errors, 4 for numeric failures,
        1 for anything else
    """
    if isinstance(error, LoopedVLMError):
        return error.exit_code
    return 1
