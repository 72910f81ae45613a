"""Exception hierarchy shared across the package."""


class FloodplanError(Exception):
    """Base class for all package errors."""


class DimensionError(FloodplanError, ValueError):
    pass


class ConfigError(FloodplanError, ValueError):
    pass


class ContractError(FloodplanError, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class NonFiniteError(FloodplanError, ValueError):
    pass


class CapabilityError(FloodplanError, RuntimeError):
    """The model lacks the component an operation needs."""


class SchemaError(FloodplanError, ValueError):
    pass


class IngestionError(FloodplanError, ValueError):
    pass


class TrainingError(FloodplanError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch
