"""Exception hierarchy.

Errors derived from :class:`DataError` describe bad input (files, manifests,
geometry); the CLI maps them to exit code 2.  Everything else derived from
:class:`OakneeError` is a usage or internal problem.
"""


class OakneeError(Exception):
    """Base class for all package errors."""


class DataError(OakneeError):
    """Input data could not be used."""


class ShapeError(OakneeError, ValueError):
    """Array shapes do not match the operation's contract."""


# geometry
class InvalidLandmarks(DataError, ValueError):
    pass


class DegenerateGeometry(DataError, ValueError):
    pass


class OutOfSupport(DataError, ValueError):
    pass


class ContoursIntersect(UserWarning):
    """Femur and tibia contours touch or cross; minJSW reported as 0."""


# imaging / texture
class InvalidResample(DataError, ValueError):
    pass


class RoiOutOfBounds(DataError, ValueError):
    pass


class PatchTooSmall(DataError, ValueError):
    pass


class InsufficientScales(DataError, ValueError):
    pass


# training / evaluation
class BatchTooSmall(OakneeError, ValueError):
    pass


class EmptyDataset(DataError, ValueError):
    pass


class DegenerateLabels(DataError, ValueError):
    pass


# file formats
class ParseError(DataError, ValueError):
    """Malformed file. ``location`` names the file and line or byte offset."""

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)


class Unsupported(DataError, ValueError):
    pass


class ManifestError(DataError, ValueError):
    pass


class CheckpointError(DataError, ValueError):
    pass


class IoError(DataError, OSError):
    pass
