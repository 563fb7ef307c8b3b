"""Exception hierarchy shared by every module."""


class IDFaceError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(IDFaceError, ValueError):
    pass


class DegenerateInput(IDFaceError, ValueError):
    pass


class RangeViolation(IDFaceError, ValueError):
    pass


class InvalidAngle(IDFaceError, ValueError):
    pass


class CapacityTooSmall(IDFaceError, ValueError):
    pass


class TooManyTemplates(IDFaceError, ValueError):
    pass


class Overflow(IDFaceError, ValueError):
    pass


class SlotOverflow(IDFaceError, ValueError):
    pass


class KeyMismatch(IDFaceError, ValueError):
    pass


class PrimeGenerationFailure(IDFaceError, RuntimeError):
    pass


class ParamMismatch(IDFaceError, ValueError):
    pass


class DuplicateId(IDFaceError, ValueError):
    pass


class InsecureModeRequired(IDFaceError, RuntimeError):
    """Raised when the simulated SIMD backend is built without the explicit flag."""


class QuadratureFailure(IDFaceError, RuntimeError):
    pass


class MalformedFrame(IDFaceError, ValueError):
    pass


class UnknownMessageType(MalformedFrame):
    pass


class LengthMismatch(MalformedFrame):
    pass


class TransportFailure(IDFaceError, ConnectionError):
    pass
