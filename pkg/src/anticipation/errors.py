"""Exception hierarchy shared across the package."""


class AnticipationError(Exception):
    """Base class for all package errors."""


class ConfigError(AnticipationError, ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DimensionError(AnticipationError, ValueError):
    pass


class DomainError(AnticipationError, ValueError):
    pass


class NonFiniteError(AnticipationError, ArithmeticError):
    pass


class IngestionError(AnticipationError, ValueError):
    pass


class LabelError(AnticipationError, ValueError):
    pass


class TrainingError(AnticipationError, RuntimeError):
    pass
