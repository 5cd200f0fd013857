"""Exception types shared across modules, mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration value or file; CLI exit code 1."""


class DataFormatError(ValueError):
    """Malformed dataset or checkpoint bytes; CLI exit code 2."""


class StateError(RuntimeError):
    """Engine called out of order (e.g. hypergradient before any inner step)."""


class NumericAbort(RuntimeError):
    """A monitored quantity went non-finite; CLI exit code 4."""

    def __init__(self, step: int, quantity: str):
        self.step = step
        self.quantity = quantity
        super().__init__(f"non-finite {quantity} at step {step}")
