"""Exception hierarchy shared across the toolkit."""


class CordsegError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(CordsegError):
    """Operands have incompatible or invalid shapes."""


class DomainError(CordsegError):
    """Numeric input outside an operation's domain (log of negative, NaN loss, ...)."""


class GraphError(CordsegError):
    """Autodiff misuse: backward without a recorded forward, non-scalar root, ..."""


class ConfigError(CordsegError):
    """Invalid or inconsistent configuration value."""


class DataFormatError(CordsegError):
    """Malformed file: bad header, byte-count mismatch, checksum failure, unknown version."""


class ManifestError(CordsegError):
    """Dataset manifest problems: overlapping splits, duplicates, missing files."""
