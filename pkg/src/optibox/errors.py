"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/config
problems exit 2, numerical failures exit 3.
"""


class OptiboxError(Exception):
    """Base class for all package-specific errors."""


class InvalidBoxError(OptiboxError):
    """A box has non-finite or non-positive extents."""


class OutOfBoundsError(OptiboxError):
    """A box lies entirely outside the clipping bounds."""


class EmptyQueryError(OptiboxError):
    """A query token sequence is empty."""


class DataFormatError(OptiboxError):
    """A dataset or config file is malformed.

    ``line`` carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingAssetError(OptiboxError):
    """A record references a feature map that the sidecar does not hold."""


class ConfigError(OptiboxError):
    """Unknown config key, bad value, or an inconsistent stage setup."""


class NumericalError(OptiboxError):
    """A computation produced non-finite values (NaN abort, exp overflow)."""
