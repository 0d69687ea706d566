"""Exception hierarchy.

Input problems derive from :class:`ValidationError` (CLI exit code 2);
numerical failures derive from :class:`NumericalError` (CLI exit code 3).
"""


class SDMAError(Exception):
    """Base class for all package errors."""


class ValidationError(SDMAError, ValueError):
    pass


class NumericalError(SDMAError, ArithmeticError):
    pass


class EmptySet(ValidationError):
    pass


class NonPositiveSE(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class DuplicateLabel(ValidationError):
    pass


class NonPositiveWeight(ValidationError):
    pass


class WeightSumError(ValidationError):
    """Weights whose sum is too far from one to be a rounding artefact."""


class WeightMismatch(ValidationError):
    pass


class TooFewEstimates(ValidationError):
    pass


class NegativeTau(ValidationError):
    pass


class UnknownScale(ValidationError):
    pass


class NullOutsideSupport(ValidationError):
    pass


class TooFewSamples(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, row, column, message):
        self.row = row
        self.column = column
        super().__init__(f"row {row}, column {column!r}: {message}")


class NonPositiveRatio(ValidationError):
    pass


class NonConvergence(NumericalError):
    pass


class QuadratureNonConvergence(NumericalError):
    pass
