"""Error taxonomy shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
bad input data exits 2, numerical failures exit 3.
"""


class GkwError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GkwError):
    """Invalid configuration value, unknown key, or bad usage."""


class DataError(GkwError):
    """Input data is missing, malformed, or inconsistent."""


class InvalidInputError(DataError):
    """Semantically invalid input (e.g. an utterance too short to process)."""


class FormatError(DataError):
    """A serialized file violates its format: bad magic, truncation, shape mismatch."""


class NumericError(GkwError):
    """A computation produced NaN or Inf, or a gradient became non-finite."""
