"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class EndoSRError(Exception):
    exit_code = 1


class ConfigurationError(EndoSRError, ValueError):
    """Invalid parameter, kernel, layer shape or config value."""


class InputError(EndoSRError, ValueError):
    """Malformed or mismatched user data (dimensions, ids, CSV rows)."""


class DatasetError(EndoSRError):
    """Dataset discovery or split failure."""


class DegenerateSampleError(InputError):
    """A statistic is undefined for the given sample (all-zero deltas, zero variance)."""


class NumericalError(EndoSRError, FloatingPointError):
    exit_code = 2


class StorageError(EndoSRError, OSError):
    """Unreadable input or unwritable output; the message names the path."""

    exit_code = 3


class FormatError(StorageError):
    """Checkpoint or report file with bad magic, version or truncated payload."""
