"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class DegenerateDataError(ValueError):
    """Data has no spread where a spread is required (e.g. zero variance)."""


class FormatError(ValueError):
    """A binary file has the wrong magic or a truncated payload."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ShortRecordingWarning(UserWarning):
    """A recording was too short to produce any slice."""
