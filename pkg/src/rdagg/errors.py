"""Exception types shared across the package."""


class RdaError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RdaError, ValueError):
    """Invalid inputs or settings: bad shapes, bad options, missing fields."""


class ConvergenceError(RdaError, RuntimeError):
    """An iterative routine hit its iteration cap.

    Carries the attained criterion value in ``attained``.
    """

    def __init__(self, message: str, attained: float = float("nan")):
        super().__init__(message)
        self.attained = attained


class EstimationError(RdaError, RuntimeError):
    """Estimation cannot proceed (empty sample, too few observations, ...)."""


class SchemaError(RdaError, ValueError):
    """A CSV file violates the expected schema; message carries file/line/column."""


class IntegrityError(RdaError, ValueError):
    """Referential integrity failure: orphan ids, duplicate ids, dangling edges."""
