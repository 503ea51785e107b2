"""Exception types shared across the package."""


class MultiBackdoorError(Exception):
    """Base class; ``stage`` names the pipeline step that failed, if known."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ConfigurationError(MultiBackdoorError, ValueError):
    pass


class ShapeError(MultiBackdoorError, ValueError):
    pass


class InputError(MultiBackdoorError, ValueError):
    pass


class TrainingError(MultiBackdoorError, RuntimeError):
    pass


class ValidationError(MultiBackdoorError, ValueError):
    pass
