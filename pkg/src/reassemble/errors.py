"""Exception hierarchy shared by all subsystems."""


class ReassemblyError(Exception):
    """Base class for every error raised by this package."""


# geometry
class EmptyMask(ReassemblyError):
    pass


class MultipleComponents(ReassemblyError):
    pass


class EmptyContour(ReassemblyError):
    pass


class TooFewPoints(ReassemblyError):
    pass


class KTooLarge(ReassemblyError):
    pass


class NonUnitRotation(ReassemblyError):
    pass


class DegeneratePolygon(ReassemblyError):
    pass


# selector
class TooFewKeypoints(ReassemblyError):
    pass


class ZeroProjectionVector(ReassemblyError):
    pass


class DegenerateSelection(ReassemblyError):
    pass


class DatasetEmpty(ReassemblyError):
    pass


# features
class KeypointOutsideImage(ReassemblyError):
    pass


class EncoderWeightsMissing(ReassemblyError):
    pass


class BadPatchShape(ReassemblyError):
    pass


class LengthMismatch(ReassemblyError):
    pass


# diffusion
class BadT(ReassemblyError):
    pass


class ShapeMismatch(ReassemblyError):
    pass


class BadTimestep(ReassemblyError):
    pass


class EmptyPiece(ReassemblyError):
    pass


class UntrainedModel(ReassemblyError):
    pass


# datagen
class CutMissesRegion(ReassemblyError):
    pass


class FragmentVanished(ReassemblyError):
    pass


class SourceUnreadable(ReassemblyError):
    pass


# metrics
class PieceSetMismatch(ReassemblyError):
    pass


class DegeneratePiece(ReassemblyError):
    pass


# pipeline
class MissingGroundTruth(ReassemblyError):
    pass


class CorruptImage(ReassemblyError):
    pass


class ScaleMissing(ReassemblyError):
    pass


class IncompatibleCheckpoint(ReassemblyError):
    pass


class MissingSolutions(ReassemblyError):
    pass
