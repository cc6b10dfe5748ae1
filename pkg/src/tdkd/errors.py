"""Toolkit error types, mapped onto CLI exit codes by the harness."""


class ConfigError(Exception):
    """Invalid configuration or flag combination (exit code 2)."""


class NumericError(Exception):
    """Non-finite loss or gradient; training refuses to continue (exit code 3)."""


class StaleTapeError(RuntimeError):
    """A recorded forward tape no longer matches the model parameters."""
