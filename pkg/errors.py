"""
DRSYNTH - Error categories
Every failure the CLI can report maps to one of these classes and its exit code.
"""

from typing import Optional


class DRSynthError(Exception):
    """Base class for all categorized failures"""

    exit_code = 1
    category = "error"


class ConfigError(DRSynthError):
    """Invalid or inconsistent experiment configuration"""

    exit_code = 2
    category = "config"


class DataValidationError(DRSynthError):
    """Input data violates a panel, mapping or design invariant"""

    exit_code = 3
    category = "data"

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)
        self.row = row
        self.column = column


class NumericalError(DRSynthError):
    """A recursion produced a non-positive variance or lost positive definiteness"""

    exit_code = 4
    category = "numerical"

    def __init__(self, message: str, date: Optional[str] = None, index: Optional[int] = None):
        self.reason = message
        if date is not None:
            message = f"{message} at {date}"
        elif index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)
        self.date = date
        self.index = index


class ConvergenceError(DRSynthError):
    """Iterative solver stopped before meeting its tolerance"""

    exit_code = 5
    category = "convergence"

    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (KKT gap {gap:.3e})")
        self.gap = gap


class PortfolioError(DRSynthError):
    """Allocation or wealth accounting is undefined for the given inputs"""

    exit_code = 6
    category = "portfolio"


class ReportWriteError(DRSynthError):
    """An output artifact could not be written"""

    exit_code = 7
    category = "report"

    def __init__(self, message: str, path: str):
        super().__init__(f"{message}: {path}")
        self.path = path
