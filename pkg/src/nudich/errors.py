"""Exception hierarchy shared by every module of the package."""
from __future__ import annotations


class NudichError(Exception):
    """Base class for all errors raised by the package."""


class ParseError(NudichError, ValueError):
    """Malformed expression text. ``offset`` is the byte offset of the fault."""

    def __init__(self, message: str, offset: int = -1, text: str | None = None):
        self.offset = offset
        self.text = text
        if offset >= 0:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class UnknownVariableError(ParseError):
    """Identifier that is neither a declared variable, a constant nor a function."""


class ArityError(ParseError):
    """Function called with the wrong number of arguments."""


class DomainError(NudichError, ArithmeticError):
    """Evaluation left the domain of an operation (log of a nonpositive number, ...)."""


class SystemDefError(NudichError, ValueError):
    """A system definition violates its structural invariants."""


class IntegrationError(NudichError, RuntimeError):
    """The adaptive integrator could not advance (step underflow, non-finite values)."""

    def __init__(self, message: str, t: float | None = None):
        self.t = t
        if t is not None:
            message = f"{message} at t={t!r}"
        super().__init__(message)


class GridFormatError(NudichError, ValueError):
    """Grid cache file is unreadable."""


class ChecksumError(GridFormatError):
    """CRC32 mismatch in a grid cache file."""


class VersionError(GridFormatError):
    """Grid cache file written by an unsupported format version."""


class SingularTransitionError(NudichError, ArithmeticError):
    """A reverse-time transition would require inverting a numerically singular matrix."""

    def __init__(self, message: str, condition: float):
        self.condition = condition
        super().__init__(f"{message} (condition estimate {condition:.3e})")


class NoGapError(NudichError):
    """No usable splitting of the singular-value spectrum: the tested shift is spectral."""

    def __init__(self, message: str, gap: float):
        self.gap = gap
        super().__init__(message)


class PreconditionError(NudichError, ValueError):
    """An operation was called outside its documented preconditions."""


class QuadratureError(NudichError, ArithmeticError):
    """Quadrature refinement disagreed beyond tolerance."""
