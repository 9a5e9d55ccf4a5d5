"""Exception types shared across the package."""


class DistNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DistNetError):
    """An array has the wrong shape along a named axis."""


class ContractError(DistNetError):
    """A documented precondition was violated by the caller."""


class ConfigError(DistNetError):
    """Invalid or inconsistent configuration."""


class NumericError(DistNetError):
    """A computation produced a non-finite value."""


class OptimizerError(NumericError):
    """A gradient block handed to the optimizer is unusable."""


class IdxParseError(DistNetError):
    """Malformed IDX byte stream; message carries the offending byte offset."""


class CheckpointError(DistNetError):
    """Checkpoint or report document fails schema or version checks."""
