"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, protocol or dataset/protocol mismatch."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class MetricError(ValueError):
    """Metrics cannot be computed on the given scores (e.g. one class only)."""


class FitError(RuntimeError):
    """An iterative fit failed to converge."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
