"""
Exception hierarchy for the Multiview-Mammo pipeline.

Every error carries the exit code the command-line interface reports for it.
"""

from typing import Optional


class MammoError(Exception):
    """Base class for all pipeline errors."""
    exit_code = 1


class ConfigError(MammoError):
    """Invalid or unknown configuration value."""
    exit_code = 2


class DataIOError(MammoError):
    """File could not be read or written."""
    exit_code = 3


class TrainingRefused(MammoError):
    """Training data cannot support a model (e.g. a single class)."""
    exit_code = 4


class FormatVersionError(MammoError):
    """Artifact written by an incompatible format version."""
    exit_code = 5


class IntegrityError(MammoError):
    """Inputs are inconsistent with each other (orphan rows, bad records)."""
    exit_code = 6


class LabelParseError(IntegrityError):
    """Unknown or out-of-scheme label token."""

    def __init__(self, token: str, message: Optional[str] = None):
        self.token = token
        super().__init__(message or f"Unknown label token: {token!r}")


class ManifestError(IntegrityError):
    """Malformed manifest row or header."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ImageFormatError(IntegrityError):
    """Image file does not match a supported raster format."""


class DegenerateImageError(IntegrityError):
    """Image has a single intensity value."""


class EmptyForegroundError(IntegrityError):
    """Thresholding left no foreground pixels."""


class RoutingError(IntegrityError):
    """An image was sent to a model trained for another view."""


class DataError(IntegrityError):
    """Non-finite numeric input."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[int] = None):
        self.row = row
        self.column = column
        super().__init__(message)
