"""Exception hierarchy shared by every stage of the pipeline."""


class MonoStereoError(Exception):
    """Base class for all library errors."""


class ZeroTranslation(MonoStereoError):
    """Relative translation is (numerically) zero, so F and the epipole are undefined."""


class DegenerateLine(MonoStereoError):
    """Epipolar line has vanishing direction (the pixel is the epipole)."""


class DegenerateRay(MonoStereoError):
    """Homogeneous point at infinity, or a pixel whose depth is unobservable."""


class NegativeDepth(MonoStereoError):
    """Triangulated depth lies behind one of the cameras."""


class ImageTooSmall(MonoStereoError):
    pass


class TooFewCorrespondences(MonoStereoError):
    pass


class DegenerateConfiguration(MonoStereoError):
    """Correspondences do not constrain a unique fundamental matrix."""


class CheiralityAmbiguous(MonoStereoError):
    """No essential-matrix decomposition wins the positive-depth vote strictly."""


class AllDegenerate(MonoStereoError):
    """Too few pixels could be triangulated to produce a depth map."""


class NoOverlap(MonoStereoError):
    """Two depth codes share too few confident pixels to align their scales."""


class ShapeMismatch(MonoStereoError, ValueError):
    pass


class EmptyOverlap(MonoStereoError, ValueError):
    """No jointly valid pixels between estimate and ground truth."""


class InvalidSpec(MonoStereoError, ValueError):
    """Scene or configuration description is unusable."""


class StageFailure(MonoStereoError):
    """A pipeline stage failed; ``stage`` names it and ``cause`` is the original error."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
