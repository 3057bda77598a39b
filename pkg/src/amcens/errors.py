"""Exception hierarchy shared across the package."""


class AmcensError(Exception):
    """Base class for all library errors."""


class ConfigError(AmcensError):
    """Invalid or inconsistent experiment configuration."""


class MissingArtifactError(AmcensError):
    """A pipeline stage requires an artifact that does not exist."""


class DivergenceError(AmcensError):
    """Training produced a non-finite epoch loss."""


class DatasetFormatError(AmcensError):
    """Base class for .sigset / weight-file parsing failures."""


class CorruptHeaderError(DatasetFormatError):
    """Manifest is unreadable or internally inconsistent."""


class VersionMismatchError(DatasetFormatError):
    """File was written with an unsupported schema version."""


class TruncatedPayloadError(DatasetFormatError):
    """Binary payload is shorter than the manifest promises."""
