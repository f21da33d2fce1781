"""Exception hierarchy shared across the engine.

Two branches matter for the CLI exit-code contract: FormatError covers
unreadable or corrupt on-disk data (exit 2), DomainError covers invalid
arguments, weights, and violated math guards (exit 1).
"""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class FormatError(EngineError):
    """On-disk data is missing, truncated, or structurally invalid."""


class DomainError(EngineError):
    """Arguments, weights, or bundle contents violate a contract."""
