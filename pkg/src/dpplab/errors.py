"""Exception hierarchy.

Every error carries the CLI exit code of its family so the command line front
end can map failures without a lookup table.
"""

from __future__ import annotations


class DppError(Exception):
    exit_code = 1


class ValidationError(DppError, ValueError):
    exit_code = 2


class NotSymmetric(ValidationError):
    pass


class SpectrumOutOfRange(ValidationError):
    def __init__(self, eigenvalue: float, message: str | None = None):
        self.eigenvalue = float(eigenvalue)
        super().__init__(message or f"eigenvalue {self.eigenvalue!r} outside the open interval (0, 1)")


class DimensionMismatch(ValidationError):
    pass


class NumericalSingularity(ValidationError):
    pass


class RefuseLargeD(ValidationError):
    def __init__(self, d: int, limit: int):
        self.d, self.limit = d, limit
        super().__init__(f"d={d} exceeds enumeration limit {limit}")


class ZeroInPivotRow(ValidationError):
    def __init__(self, column: int):
        self.column = column
        super().__init__(f"pivot-row entry in column {column} is zero; sign pattern undefined")


class AssumptionViolated(ValidationError):
    pass


class EstimationError(DppError):
    exit_code = 3


class EmptySample(EstimationError):
    pass


class NegativeCovArgument(EstimationError):
    def __init__(self, i: int, j: int, value: float):
        self.pair, self.value = (i, j), float(value)
        super().__init__(
            f"negative covariance argument {self.value:.3g} for pair ({i}, {j}); "
            "sample too small or entry truly zero (try the robust regime)"
        )


class ZeroSignArgument(EstimationError):
    def __init__(self, i: int, j: int):
        self.pair = (i, j)
        super().__init__(f"sign argument is exactly zero for pair ({i}, {j})")


class AmbiguousSign(EstimationError):
    pass


class DerivativeGuard(EstimationError):
    pass


class FitError(DppError):
    exit_code = 4


class NoAdmissibleStart(FitError):
    pass


class BoundError(DppError):
    exit_code = 5


class InvalidEta(BoundError, ValueError):
    pass


class NonPositiveEta(BoundError):
    pass


class TTooSmall(BoundError, ValueError):
    pass


class ExperimentFailed(DppError):
    exit_code = 6
