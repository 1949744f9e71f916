"""Exceptions raised across the lab"""
from typing import Optional


class LabError(Exception):
    """Base class for every error raised by offrl_lab"""


class ShapeError(LabError, ValueError):
    """Array dimensions do not match what an operation expects"""


class ContractError(LabError):
    """A precondition of an operation was violated by the caller"""


class DomainError(LabError, ValueError):
    """Parameters fall outside the domain where a formula is defined"""


class ConfigurationError(LabError):
    """Settings are inconsistent with each other or with the data"""


class NumericalError(LabError, FloatingPointError):
    """A non-finite value showed up where a finite one is required"""

    def __init__(
        self, message: str, row: Optional[int] = None, step: Optional[int] = None
    ) -> None:
        """Keep the offending row and training step next to the message.

        Parameters
        ----------
        message : str
            human readable description
        row : Optional[int], optional
            batch row that produced the value, by default None
        step : Optional[int], optional
            training step during which it happened, by default None
        """
        details = []
        if row is not None:
            details.append(f"row {row}")
        if step is not None:
            details.append(f"step {step}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.row = row
        self.step = step


class DatasetFormatError(LabError):
    """A dataset file could not be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        """Attach the 1-based line number of the broken record, if known."""
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DatasetIntegrityError(LabError):
    """Dataset contents disagree with the metadata stored next to them"""

    def __init__(self, message: str, expected: int, found: int) -> None:
        """Record both counts so callers can report them."""
        super().__init__(f"{message}: expected {expected} transitions, found {found}")
        self.expected = expected
        self.found = found


class CheckpointFormatError(LabError):
    """A checkpoint container is not one this version can read"""
