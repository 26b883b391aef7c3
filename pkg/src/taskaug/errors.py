"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration or precondition violation detected before running."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed; the message names the bad record."""
