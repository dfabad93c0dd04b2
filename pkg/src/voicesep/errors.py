"""Exception hierarchy shared across the toolkit.

Every error class maps to a CLI exit code (see cli.EXIT_CODES) so that
failures are machine-distinguishable.
"""


class VoicesepError(Exception):
    """Base class for all toolkit errors."""


class UsageError(VoicesepError):
    """API misuse: backward on a detached tensor, bad call sequence."""


class DimensionError(VoicesepError):
    """Tensor shape mismatch; the message names the offending axis."""


class ConfigurationError(VoicesepError):
    """Invalid hyperparameter or structural configuration."""


class InputError(VoicesepError):
    """Input data violates an operation precondition."""


class DegenerateTargetError(InputError):
    """A reference signal has zero energy; metric undefined."""


class DataError(VoicesepError):
    """Corpus or manifest level problem (infeasible split, bad entry)."""


class FormatError(DataError):
    """Malformed file on disk; message carries the byte offset when known."""


class CheckpointError(VoicesepError):
    """Checkpoint file inconsistent with its header config."""


class NumericError(VoicesepError):
    """Non-finite value encountered where finiteness is required."""
