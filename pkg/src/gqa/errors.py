class GQAError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 2


class DataError(GQAError):
    """Malformed or unusable input data (files, manifests, clouds)."""

    exit_code = 2


class ConfigError(GQAError):
    """Invalid experiment or command configuration."""

    exit_code = 1


class StagingError(GQAError):
    """A pipeline stage was requested before its prerequisites exist."""

    exit_code = 3


class UnsupportedDistortionError(DataError):
    pass
