"""Exception types shared across the package."""


class TetraFieldError(Exception):
    """Base class for all package errors."""


class DegenerateTetra(TetraFieldError):
    """Tetrahedron volume is below the degeneracy threshold."""


class TooFewPoints(TetraFieldError):
    """Operation needs more input points than were supplied."""


class DegenerateInput(TetraFieldError):
    """Point set is collinear/coplanar or contains duplicates where forbidden."""


class ParseError(TetraFieldError):
    """Malformed input file.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedProperty(TetraFieldError):
    """PLY vertex element declares a property layout we cannot read."""


class SizeMismatch(TetraFieldError):
    """Array shapes disagree with the mesh or cloud they must match."""


class NonFiniteActivation(TetraFieldError):
    """NaN/Inf appeared in a network activation (training diverged)."""


class NonFiniteGradient(TetraFieldError):
    """NaN/Inf appeared in a gradient fed to the optimizer."""


class OutOfSegment(TetraFieldError):
    """Queried distance lies outside the segment's [t_in, t_out]."""


class OutOfBounds(TetraFieldError):
    """Pixel coordinate outside the camera's image plane."""


class OutOfBox(TetraFieldError):
    """Query point lies outside the dense grid's bounding box."""


class DimMismatch(TetraFieldError):
    """Two images must share dimensions for metric computation."""


class EmptyTrace(TetraFieldError):
    """Ray crosses no tetrahedra; there is nothing to sample."""
