"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: configuration and usage
problems exit 2, quantitative acceptance failures exit 1.
"""


class ConfigError(ValueError):
    """Invalid configuration: shape/channel/group mismatch, bad hyperparameter."""


class FormatError(ValueError):
    """Malformed serialized data. Messages name the byte offset of the defect."""


class UsageError(RuntimeError):
    """API misuse: stale cache, empty dataset, wrong call order."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the step."""
