"""Exception types raised across the package."""


class TsSSLError(Exception):
    """Base class for every error raised by tsssl."""


class ShapeError(TsSSLError, ValueError):
    pass


class AxisError(TsSSLError, ValueError):
    pass


class ContractError(TsSSLError):
    """A documented precondition was violated by the caller."""


class NumericError(TsSSLError, FloatingPointError):
    """A forward computation produced NaN/Inf or hit a degenerate value."""


class DeterminismError(TsSSLError):
    pass


class ConfigError(TsSSLError, ValueError):
    pass


class DataError(TsSSLError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class SplitError(DataError):
    pass


class TilingError(TsSSLError, ValueError):
    pass


class ReconstructionError(TsSSLError, ValueError):
    pass


class MetricError(TsSSLError, ValueError):
    pass


class TrainingError(TsSSLError, RuntimeError):
    """Training aborted; carries the epoch/batch where it happened."""

    def __init__(self, message, epoch=None, batch=None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if batch is not None:
            where.append(f"batch {batch}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
