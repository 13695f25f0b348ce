"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or index signatures are inconsistent."""


class DomainError(ValueError):
    """A value lies outside an operation's numeric domain."""


class ConfigError(ValueError):
    """A configuration object or file is invalid."""


class DataFormatError(ValueError):
    """A serialized file is malformed (bad magic, truncation, bad header)."""


class FormatVersionError(DataFormatError):
    """A serialized file declares an unsupported format version."""
