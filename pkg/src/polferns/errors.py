"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigurationError(ValueError):
    """A training or optimization setup that cannot be satisfied."""


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""
