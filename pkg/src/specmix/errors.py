"""Exception and warning types shared across the package."""


class SpecmixError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(SpecmixError):
    """Operand shapes are incompatible."""


class NonFinite(SpecmixError):
    """A value that must be finite contains NaN or Inf."""


class NotPositiveDefinite(SpecmixError):
    """Cholesky factorization failed even at the maximum jitter."""


class ConstraintViolation(SpecmixError):
    """A parameter value violates its declared range."""


class ParseError(SpecmixError):
    """A CSV cell could not be parsed; carries row and column."""

    def __init__(self, row, column, message):
        super().__init__(f"row {row}, column {column!r}: {message}")
        self.row = row
        self.column = column


class MissingColumn(SpecmixError):
    """The requested target column does not exist."""


class DegenerateColumn(SpecmixError):
    """A column has zero standard deviation on the training split."""


class SnapshotMismatch(SpecmixError):
    """A model snapshot disagrees with the dataset it is applied to."""


class WrongKernel(SpecmixError):
    """The command does not support the snapshot's kernel type."""


class AllRestartsFailed(SpecmixError):
    """Every restart candidate produced a non-finite objective."""


class DuplicateInputs(UserWarning):
    """Duplicate input locations found; Nyquist computed on distinct values."""
