"""Exception types shared across the package."""


class BTAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BTAError):
    """Invalid configuration or cross-reference (unknown ticker, bad key...)."""

    def __init__(self, message: str, key_path: str | None = None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class MarketGenerationError(BTAError):
    pass


class TradeRejected(BTAError):
    """A trade would have driven a price to zero or below; nothing was applied."""


class InfeasibleTarget(BTAError):
    """Requested fractional price move exceeds the single-trade cap."""


class DatasetError(BTAError):
    pass


class TrainingError(BTAError):
    pass


class ContractError(BTAError):
    """Shape or interface mismatch between a model and its input."""


class AttackError(BTAError):
    pass


class PlanError(BTAError):
    """A trade plan cannot be compiled, typically because it exceeds the budget."""

    def __init__(self, message: str, shortfall: float = 0.0):
        self.shortfall = shortfall
        super().__init__(message)


class DependencyError(BTAError):
    """A pipeline stage was run before the stage producing its inputs."""

    def __init__(self, message: str, missing_stage: str | None = None):
        self.missing_stage = missing_stage
        super().__init__(message)
