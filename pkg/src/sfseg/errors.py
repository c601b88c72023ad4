"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class StateError(RuntimeError):
    """Object is not in a state that allows the requested operation."""


class UsageError(RuntimeError):
    """API used in a way the contract forbids."""


class FormatError(ValueError):
    """Serialized file has the wrong magic, version or layout."""
