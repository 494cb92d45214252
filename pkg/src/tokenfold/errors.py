"""Exception types shared across the package."""


class TokenfoldError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(TokenfoldError):
    """Array arguments have incompatible shapes or lengths."""


class DegenerateGeometry(TokenfoldError):
    """Atom triplet is collinear/coincident, no frame can be built."""


class ConfigError(TokenfoldError):
    """Invalid configuration value or unusable input for an operation."""


class ParseError(TokenfoldError):
    """Malformed input file; carries a line number where known."""

    def __init__(self, message, line_number=None):
        super().__init__(message if line_number is None else f"line {line_number}: {message}")
        self.line_number = line_number


class FormatError(TokenfoldError):
    """Value cannot be represented in the requested output format."""


class CacheInvalid(TokenfoldError):
    """Attention cache is missing or stale for the requested partial update."""
