"""Exception types shared across the package."""


class DCTTSError(Exception):
    """Base class for all package errors."""


class ConfigError(DCTTSError, ValueError):
    """Bad configuration: shapes, hyperparameters, config files."""


class InputError(DCTTSError, ValueError):
    """Invalid user-supplied data (text, audio, tokens, alignments)."""


class UsageError(DCTTSError, RuntimeError):
    """API called in the wrong order or state."""


class NumericError(DCTTSError, ArithmeticError):
    """Non-finite values encountered during training or sampling."""


class CheckpointError(DCTTSError, IOError):
    """Missing, corrupt or untrained checkpoint."""
