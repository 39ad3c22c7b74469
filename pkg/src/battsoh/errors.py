"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: validation problems exit 1,
numerical failures exit 2, I/O failures exit 3.
"""


class BattsohError(Exception):
    """Base class for all package errors."""


class ValidationError(BattsohError):
    """Bad inputs: malformed files, violated preconditions, bad config."""


class NumericalError(BattsohError):
    """Numerical failure: NaN loss, singular matrices, non-convergence."""


class ArtifactIOError(BattsohError):
    """Reading or writing an artifact failed."""
