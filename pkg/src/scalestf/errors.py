"""Exception hierarchy shared by the library and the CLI."""


class ScaleSTFError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ScaleSTFError, ValueError):
    pass


class ConfigError(ScaleSTFError, ValueError):
    pass


class DataError(ScaleSTFError):
    pass


class NumericalError(ScaleSTFError, ArithmeticError):
    pass


class InstabilityError(NumericalError):
    """A simulated recurrence left its bounded regime."""


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class CapacityError(ScaleSTFError, MemoryError):
    """Requested dense allocation exceeds the configured cap."""


class EmptyMaskWarning(UserWarning):
    pass
