"""Multi-attacker backdoor poisoning games on small numpy CNNs."""

__version__ = "0.1.0"

from .errors import (ConfigurationError, InputError, MultiBackdoorError, ShapeError, TrainingError,  # noqa: E402
                     ValidationError)

__all__ = ["__version__", "MultiBackdoorError", "ConfigurationError", "InputError", "ShapeError", "TrainingError",
           "ValidationError"]
