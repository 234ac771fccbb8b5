"""Exception classes shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class NonFiniteValueError(ContractViolationError):
    """A tensor that must be finite contained NaN or infinity."""


class DataFormatError(ValueError):
    """A file on disk does not conform to its declared format."""


class EmptyMaskError(ValueError):
    """A metric was requested over a mask with no selected pixels."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable, corrupt, or incompatible."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


class StartupError(RuntimeError):
    """A training stage cannot start (missing prerequisite or empty data)."""


class NumericalAbortError(RuntimeError):
    """Training hit a non-finite loss and aborted."""
