"""Exception types raised across the package."""


class ProvenanceError(Exception):
    """Base class for all package errors."""


class ImageIOError(ProvenanceError, OSError):
    """Missing or unreadable file."""


class FormatError(ProvenanceError, ValueError):
    """Bytes that cannot be decoded."""


class DimensionMismatch(ProvenanceError, ValueError):
    pass


class InvalidParams(ProvenanceError, ValueError):
    pass


class EmptyInput(ProvenanceError, ValueError):
    pass


class VersionMismatch(ProvenanceError, ValueError):
    """Wrong magic bytes or unsupported file version."""


class InsufficientMatches(ProvenanceError):
    pass


class DegenerateGeometry(ProvenanceError):
    pass


class QueryIdMismatch(ProvenanceError, ValueError):
    pass


class EmptyQueryFeatures(ProvenanceError):
    pass


class IndexUnavailable(ProvenanceError):
    pass


class ManifestParseError(ProvenanceError, ValueError):
    pass


class MissingGroundTruth(ProvenanceError, KeyError):
    pass


class InsufficientBaseImages(ProvenanceError, ValueError):
    pass
