from __future__ import annotations

from typing import Optional

from mvgrid_edit.definitions import EXIT_DATA, EXIT_NUMERICAL, EXIT_USAGE


class MvEditError(Exception):
    "Base error of the package; ``exit_code`` is what the command line returns for it"

    exit_code = 1


class ShapeError(MvEditError, ValueError):
    "Raised when grids, views or noise do not have the shapes the layout requires"

    exit_code = EXIT_DATA


class ConfigError(MvEditError, ValueError):
    "Raised for invalid configuration values, unknown keys or unknown preset names"

    exit_code = EXIT_USAGE


class DataError(MvEditError):
    "Raised when files are missing, unreadable or malformed"

    exit_code = EXIT_DATA


class NumericalError(MvEditError):
    """
    Raised when a velocity prediction or training loss stops being finite.

    ``step`` is the schedule step (or epoch) at which it happened.
    """

    exit_code = EXIT_NUMERICAL

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class UndefinedMetricError(MvEditError, ValueError):
    "Raised when a metric has no value for its inputs (no unedited region, or no ground-truth change)"

    exit_code = EXIT_DATA
