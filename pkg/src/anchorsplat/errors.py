"""Exception hierarchy shared across the package."""


class AnchorSplatError(Exception):
    """Base class for all package errors."""


class ValidationError(AnchorSplatError):
    """Input violates a documented precondition or invariant."""


class ParseError(AnchorSplatError):
    """A file or config value could not be parsed."""


class IntegrityError(AnchorSplatError):
    """A checkpoint is truncated, corrupted, or version-incompatible."""


class InternalError(AnchorSplatError):
    """An internal invariant was violated (bug, not user error)."""
