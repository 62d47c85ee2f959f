"""Exception hierarchy.

Validation errors signal bad inputs (CLI exit code 2); numerical errors
signal a failure inside an otherwise valid computation (exit code 3).
"""

from __future__ import annotations


class BreakIVError(Exception):
    """Base class for all package errors."""


class ValidationError(BreakIVError, ValueError):
    """Input does not satisfy a documented precondition."""


class NumericalError(BreakIVError, ArithmeticError):
    """A matrix required by the computation is singular or indefinite."""


class MissingColumn(ValidationError):
    pass


class NonNumericCell(ValidationError):
    def __init__(self, row: int, col: str, value: str) -> None:
        super().__init__(f"non-numeric cell at row {row}, column {col!r}: {value!r}")
        self.row = row
        self.col = col
        self.value = value


class DimensionMismatch(ValidationError):
    pass


class TooFewRows(ValidationError):
    pass


class SegmentTooShort(ValidationError):
    pass


class BandwidthTooLarge(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularWeighting(NumericalError):
    pass


class NotPsd(NumericalError):
    pass


class NotPd(NumericalError):
    pass
