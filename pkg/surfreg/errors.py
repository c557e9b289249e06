"""Exception hierarchy for surfreg."""

from typing import Any, Dict, Optional


class SurfRegError(Exception):
    """Base class for all surfreg errors."""

    exit_code = 1


class ConfigError(SurfRegError):
    """Invalid configuration, schedule or CLI value."""

    exit_code = 2


class GeometryError(SurfRegError, ValueError):
    """Precondition violation in a sampling or geometry operation."""

    exit_code = 2


class FormatError(SurfRegError):
    """Malformed checkpoint, image or CSV file."""


class DimensionError(SurfRegError, ValueError):
    """Mismatched shapes between rendered and reference data."""


class NumericError(SurfRegError):
    """Non-finite value encountered during optimisation."""

    exit_code = 3

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
