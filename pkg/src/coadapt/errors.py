class CoadaptError(Exception):
    """Base class for library errors."""


class ValidationError(CoadaptError, ValueError):
    """Input violates a documented invariant."""


class ParseError(CoadaptError, ValueError):
    """Malformed file content."""


class NotFoundError(CoadaptError, LookupError):
    """Requested configuration is absent or has no feasible entry."""


class ConfigurationError(CoadaptError, ValueError):
    """Run or decision setup is inconsistent (empty candidate set, missing config)."""


class InsufficientSamplesError(CoadaptError, ValueError):
    """Too few gradient samples to form an unbiased estimate."""


class GnsUnavailable(CoadaptError):
    """Smoothed signal is not yet positive; no noise scale can be emitted."""


class InvariantViolation(CoadaptError, AssertionError):
    """Internal consistency check failed (indicates a bug, not bad input)."""
