"""Exception types shared across the package."""


class ArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class StateError(RuntimeError):
    """An object lacks the state an operation needs (e.g. a missing head)."""


class TransferError(ValueError):
    """Parameters cannot be copied between stores (shape or backbone mismatch)."""


class DatasetFormatError(ValueError):
    """A dataset or checkpoint on disk does not follow the expected schema."""


class DatasetIOError(OSError):
    """A file referenced by a dataset or checkpoint is missing or unreadable."""


class ConfigurationError(ValueError):
    """A stage or pipeline configuration is inconsistent with its data."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""
