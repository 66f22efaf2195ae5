"""Exception types shared across the package."""


class SketchfieldError(Exception):
    """Base class for all package-specific errors."""


# --- checkpoint I/O ---------------------------------------------------------

class BadMagic(SketchfieldError):
    """File does not start with the SKFD magic bytes."""


class VersionMismatch(SketchfieldError):
    """SKFD file written by an incompatible format version."""


class TruncatedFile(SketchfieldError):
    """SKFD file ends before all declared payload bytes."""


class ChecksumMismatch(SketchfieldError):
    """SKFD trailing CRC32 does not match the file contents."""


# --- geometry ---------------------------------------------------------------

class NoOverlap(SketchfieldError):
    """Requested region does not intersect the field bounds."""


class EmptySketchSet(SketchfieldError):
    """An operation needing sketch views received none."""


class EmptyIntersection(SketchfieldError):
    """Back-projected sketch regions share no 3D volume."""


class BehindCamera(SketchfieldError):
    """Point projects behind the camera plane."""


class OpenCurve(Warning):
    """Scribble strokes enclose no region; a dilated-stroke mask is used."""


# --- numerics ---------------------------------------------------------------

class NonFiniteGradient(SketchfieldError):
    """A backward pass produced NaN or infinite gradients."""


class NonFiniteLoss(SketchfieldError):
    """The optimization objective became NaN or infinite."""


class ConfigError(SketchfieldError):
    """Configuration value outside its legal range."""


# --- guidance wire protocol -------------------------------------------------

class ProviderTimeout(SketchfieldError):
    """Guidance provider did not answer within the deadline (after retry)."""


class ShapeMismatch(SketchfieldError):
    """Provider response shape differs from the request image shape."""


class HandshakeVersionError(SketchfieldError):
    """Wire-protocol peer announced an unsupported version."""
