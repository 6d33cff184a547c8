"""Exception hierarchy shared across the package.

Wire-facing errors carry a short machine-readable ``code`` so site servers
can map them onto protocol error responses and the CLI onto exit codes.
"""

from __future__ import annotations


class FedfitError(Exception):
    """Base class for all package errors."""

    code = "internal"


class DimensionMismatchError(FedfitError, ValueError):
    code = "bad-request"


class NonFiniteValueError(FedfitError, ValueError):
    code = "bad-request"


class NumericError(FedfitError):
    """Numeric failure during a fit or decomposition."""

    code = "numeric"


class SingularInformationError(NumericError):
    """Cholesky hit a non-positive-definite pivot."""


class NonIdentifiableModelError(SingularInformationError):
    """The information matrix is singular at the current coefficients."""


class NumericOverflowError(NumericError):
    """exp() of a linear predictor overflowed; names the offending subject."""

    def __init__(self, message: str, subject_index: int | None = None):
        super().__init__(message)
        self.subject_index = subject_index


class DegenerateInputError(NumericError):
    code = "degenerate"


class InvalidRankError(FedfitError, ValueError):
    code = "invalid-rank"


class FormulaError(FedfitError, ValueError):
    """Model formula could not be parsed; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset

    code = "validation"


class DataFormatError(FedfitError, ValueError):
    code = "validation"


class ValidationError(FedfitError, ValueError):
    code = "validation"


class SchemaViolationError(FedfitError, ValueError):
    """Wire message failed schema checks; ``pointer`` locates the field."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{message} (at {pointer or '/'})")
        self.pointer = pointer

    code = "schema"


class ProtocolVersionError(SchemaViolationError):
    code = "protocol-version"


class UnauthorizedError(FedfitError):
    """Caller could not be authenticated (unknown or missing token)."""

    code = "unauthenticated"


class NotAuthorizedError(FedfitError):
    """Authenticated peer is not permitted to touch this computation."""

    code = "not-authorized"


class ComputationNotFoundError(FedfitError):
    code = "not-found"


class IllegalMethodError(FedfitError):
    code = "illegal-method"


class ConflictError(FedfitError):
    code = "conflict"


class ConfigError(FedfitError):
    code = "config"


class SiteError(FedfitError):
    """A site request failed; carries the site name for attribution."""

    def __init__(self, site: str, message: str, *, transport: bool = False):
        super().__init__(f"site '{site}': {message}")
        self.site = site
        self.transport = transport

    code = "site"
