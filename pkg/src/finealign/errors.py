"""Exception types raised across the package."""


class AlignmentError(Exception):
    """Base class for every error raised by finealign."""


class ZeroVector(AlignmentError, ValueError):
    pass


class DimMismatch(AlignmentError, ValueError):
    pass


class EmptySequence(AlignmentError, ValueError):
    pass


class CropTooSmall(AlignmentError, ValueError):
    pass


class NonBalancedMarginals(AlignmentError, ValueError):
    pass


class TooLarge(AlignmentError, ValueError):
    pass


class NotConvergedWarning(UserWarning):
    """Sinkhorn hit max_iters before reaching tol; the best iterate is still returned."""


class NonStochasticTargets(AlignmentError, ValueError):
    pass


class ShapeMismatch(AlignmentError, ValueError):
    pass


class AlphaOutOfRange(AlignmentError, ValueError):
    pass


class IndexOutOfRange(AlignmentError, IndexError):
    pass


class NonFinite(AlignmentError, FloatingPointError):
    pass


class SpecInfeasible(AlignmentError, ValueError):
    pass


class DivergedLoss(AlignmentError, FloatingPointError):
    pass


class EmbeddingFileError(AlignmentError, ValueError):
    """Base class for malformed embedding files."""


class BadMagic(EmbeddingFileError):
    pass


class TruncatedPayload(EmbeddingFileError):
    pass


class VersionUnsupported(EmbeddingFileError):
    pass


class InvalidMask(EmbeddingFileError):
    pass
