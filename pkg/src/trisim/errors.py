"""Exception types shared across the workbench."""


class TrisimError(Exception):
    """Base class for all workbench errors."""


class ConfigError(TrisimError):
    """A configuration value violates its invariants."""


class ContractError(TrisimError, ValueError):
    """An operation was called outside its contract."""


class ShapeError(ContractError):
    """Input shapes do not match what the operation expects."""


class SimulationDivergedError(TrisimError):
    """Particle positions became non-finite."""


class TrainingDivergedError(TrisimError):
    """A training loss became non-finite."""


class MissingInputError(TrisimError):
    """A required input artifact is absent (CLI exit code 2)."""

    def __init__(self, path: str, message: str | None = None):
        self.path = path
        super().__init__(message or f"missing required input: {path}")
