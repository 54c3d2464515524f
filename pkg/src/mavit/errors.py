"""Exception types shared across the package."""


class MavitError(Exception):
    """Base class for all package errors."""


class ShapeError(MavitError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ContractError(MavitError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(MavitError):
    """Invalid model, dataset, or run configuration."""


class ManifestError(MavitError):
    """Dataset manifest or tensor file failed validation."""


class NumericError(MavitError):
    """A computation produced non-finite values."""
