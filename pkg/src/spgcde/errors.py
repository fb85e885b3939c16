"""Exception types shared across the package.

The CLI maps the three top-level families to exit codes:
config problems -> 2, data problems -> 3, checkpoint problems -> 4.
"""


class SpgcdeError(Exception):
    exit_code = 1


class ConfigError(SpgcdeError, ValueError):
    exit_code = 2


class BadConfig(ConfigError):
    """Invalid architectural hyperparameters (heads, flow pairs, ...)."""


class BadGeometry(ConfigError):
    """Input spatial size incompatible with the encoder strides."""


class BadSpec(ConfigError):
    """Synthetic data specification cannot be realised."""


class DataError(SpgcdeError):
    exit_code = 3


class ShapeMismatch(DataError, ValueError):
    pass


class BadLabels(DataError, ValueError):
    pass


class MissingPrior(DataError, FileNotFoundError):
    pass


class CorruptCase(DataError):
    pass


class CheckpointMismatch(SpgcdeError):
    exit_code = 4
