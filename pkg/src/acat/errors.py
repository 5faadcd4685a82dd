class AcatError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AcatError, ValueError):
    pass


class FormatError(AcatError):
    """A weight/image/config file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(AcatError, RuntimeError):
    pass


class TrainingError(AcatError, RuntimeError):
    pass


class AttackError(AcatError, RuntimeError):
    pass


class PlacementError(AcatError, ValueError):
    pass


class DegenerateMaskError(AcatError, ValueError):
    """A mask has no adversarial or no clean pixels where both are required."""


class DataError(AcatError, ValueError):
    pass
