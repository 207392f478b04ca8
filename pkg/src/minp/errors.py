"""Exception types.

Two families matter to callers: :class:`DataError` (bad input, exit code 2 in
the CLI) and :class:`NumericalError` (a computation that cannot proceed,
exit code 3).
"""


class MinPError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MinPError):
    pass


class NumericalError(MinPError):
    pass


class NotPositiveDefinite(NumericalError):
    def __init__(self, message="matrix is not positive definite", pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SingularCovariance(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class BootstrapDegenerate(NumericalError):
    def __init__(self, failures, attempts):
        super().__init__(
            f"{failures} bootstrap draws failed out of {attempts} attempted"
        )
        self.failures = failures
        self.attempts = attempts


class ArityMismatch(MinPError, ValueError):
    pass


class MissingColumn(DataError):
    def __init__(self, *names):
        super().__init__("missing column(s): " + ", ".join(names))
        self.names = names


class NonNumericCell(DataError):
    def __init__(self, row, column, value=None):
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value


class TooFewRows(DataError):
    def __init__(self, rows, needed):
        super().__init__(f"{rows} rows; need more than {needed}")
        self.rows = rows
        self.needed = needed


class ConfigInvalid(DataError):
    def __init__(self, field, reason="invalid value"):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class ExplosiveVariance(ConfigInvalid):
    def __init__(self, total):
        super().__init__("gamma_true", f"ARCH coefficients sum to {total:g} >= 1")
