"""Exception types shared across the package."""


class GnnStealError(Exception):
    """Base class for all package errors."""


class IngestionError(GnnStealError):
    """A required input file is missing or unreadable."""


class FormatError(GnnStealError):
    """Malformed file contents (TU text files, model files, wire messages)."""


class ConfigError(GnnStealError, ValueError):
    """Invalid configuration value or combination."""


class DimensionError(GnnStealError, ValueError):
    """Shape or width mismatch."""


class TrainingError(GnnStealError):
    """Training diverged. ``epoch`` holds the offending epoch index."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class UndefinedMetricError(GnnStealError, ValueError):
    """Metric is undefined for the given input (e.g. single-class AUC)."""


class BudgetExhausted(GnnStealError):
    """The oracle refused a query because its budget is spent."""

    code = "budget_exhausted"


class OracleConnectionError(GnnStealError, ConnectionError):
    """Transport-level failure talking to a remote oracle. Retriable."""


class ProtocolError(GnnStealError):
    """Undecodable or unexpected message from a remote oracle. Fatal."""
