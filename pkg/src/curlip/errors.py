"""Exception types raised across the package."""


class CurlIpError(Exception):
    """Base class for all package errors."""


class MalformedUrl(CurlIpError, ValueError):
    pass


class SchemaError(CurlIpError, ValueError):
    pass


class LabelError(CurlIpError, ValueError):
    pass


class BadRatios(CurlIpError, ValueError):
    pass


class VocabTooSmall(CurlIpError, ValueError):
    pass


class NoMaskablePositions(CurlIpError, ValueError):
    pass


class BadIp(CurlIpError, ValueError):
    pass


class EmptyInput(CurlIpError, ValueError):
    pass


class NoDomain(CurlIpError, ValueError):
    pass


class ShapeMismatch(CurlIpError, ValueError):
    pass


class DegenerateVector(CurlIpError, ValueError):
    pass


class EmptyMaskSet(CurlIpError, ValueError):
    pass


class LengthMismatch(CurlIpError, ValueError):
    pass


class DegenerateLabels(CurlIpError, ValueError):
    pass


class ConfigError(CurlIpError, ValueError):
    pass


class CheckpointError(CurlIpError, ValueError):
    pass
