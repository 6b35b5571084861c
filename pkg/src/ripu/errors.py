"""Exception hierarchy shared by the library and the command line tool.

Each class maps to one process exit code so shell callers can dispatch on
the failure kind without parsing messages.
"""


class RipuError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class UsageError(RipuError):
    """Bad command line arguments or an impossible request."""

    exit_code = 2


class ValidationError(RipuError):
    """An input violates a documented invariant; message names it."""

    exit_code = 3


class TensorIOError(RipuError):
    """File system failure or unparsable tensor/manifest file."""

    exit_code = 4


class FormatError(TensorIOError):
    """Malformed tensor file; carries the byte offset of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(RipuError):
    """Non-finite loss or other numerical breakdown during training."""

    exit_code = 5
