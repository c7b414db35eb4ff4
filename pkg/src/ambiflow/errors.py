"""Exception hierarchy shared across the package."""


class AmbiflowError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AmbiflowError):
    """Operands have incompatible shapes."""


class NumericError(AmbiflowError):
    """An operation produced a non-finite value or an invalid numeric state."""


class ConfigError(AmbiflowError):
    """Invalid configuration key, value, or file."""


class FileFormatError(AmbiflowError):
    """Base class for structured-file problems."""


class VersionMismatchError(FileFormatError):
    """File carries an unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ended before the declared payload was read."""


class ChecksumError(FileFormatError):
    """Stored checksum does not match the file content."""
