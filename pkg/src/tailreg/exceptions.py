"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class DigestMismatchError(RuntimeError):
    """A persisted artifact does not match its recorded digest."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; the message names the epoch."""
