"""Exception types shared across the package."""


class AbmLoraError(Exception):
    pass


class DimensionError(AbmLoraError, ValueError):
    pass


class ConfigError(AbmLoraError, ValueError):
    pass


class DataError(AbmLoraError, ValueError):
    pass


class NumericalError(AbmLoraError, ArithmeticError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class ConsistencyError(AbmLoraError, AssertionError):
    """An internal identity or inequality failed beyond its slack."""
