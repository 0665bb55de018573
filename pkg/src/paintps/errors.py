"""Exception types shared by every stage.

Input problems (bad files, bad parameters) and numerical failures are kept
apart so the CLI can map them to distinct exit codes.
"""


class PaintPSError(Exception):
    """Base class for all package errors."""


class InputError(PaintPSError, ValueError):
    """Malformed, missing or inconsistent input."""


class NumericalError(PaintPSError, ArithmeticError):
    """A solver or fit could not produce a meaningful result."""
