"""Exception hierarchy."""


class GGDAError(Exception):
    """Base class for package errors."""


class NumericalError(GGDAError):
    """A numerical routine failed; the CLI maps these to exit code 3."""


class NotSPD(NumericalError):
    """Cholesky factorization met a non-positive pivot."""


class Divergence(NumericalError):
    """An iterative solver produced non-finite or exploding iterates."""


class NonFiniteLoss(NumericalError):
    """Training loss became NaN/Inf, usually a learning rate that is too high."""


class TooLarge(GGDAError):
    """Requested a dense object beyond the size guard."""


class ParseError(GGDAError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        locus = []
        if row is not None:
            locus.append(f"row {row}")
        if column is not None:
            locus.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(locus)})" if locus else message)
        self.row = row
        self.column = column


class MissingColumn(GGDAError):
    pass


class SchemaError(GGDAError):
    pass


class ConfigError(GGDAError):
    """Invalid run configuration; ``field`` is a dotted path such as ``dataset.path``."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
