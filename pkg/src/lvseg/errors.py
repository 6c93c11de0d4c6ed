"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto the
documented process exit status (2 data error, 3 numerical failure).
"""


class LvSegError(Exception):
    exit_code = 2


class DataError(LvSegError):
    exit_code = 2


class MalformedHeader(DataError):
    pass


class UnsupportedDataType(DataError):
    pass


class IoFailure(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class InvalidTarget(DataError):
    pass


class InvalidSpec(DataError):
    pass


class OutOfRange(DataError):
    pass


class ImageTooSmall(DataError):
    pass


class EmptyClass(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyMask(DataError):
    pass


class ZeroIntensity(DataError):
    pass


class EmptyGrid(DataError):
    pass


class EmptyStudy(DataError):
    pass


class MissingLabels(DataError):
    pass


class NonFiniteField(LvSegError):
    """Level-set evolution diverged; usually a too-large time step."""

    exit_code = 3
