"""Error taxonomy shared across the package.

ValidationError and FormatError map to CLI exit codes 1 and 2 respectively;
plain OSError also maps to 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValueError):
    """A serialized file is malformed. `kind` names the failing check."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
