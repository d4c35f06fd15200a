"""Exception types raised across the retrieval pipeline."""


class RetrievalError(Exception):
    """Base class for every error raised by vqspk."""


class UnsupportedFormat(RetrievalError):
    pass


class CorruptFile(RetrievalError):
    pass


class TooShort(RetrievalError):
    pass


class EmptyCorpus(RetrievalError):
    pass


class TooFewFrames(RetrievalError):
    pass


class DimensionMismatch(RetrievalError):
    pass


class EmptySegment(RetrievalError):
    pass


class ZeroVector(RetrievalError):
    pass


class EmptyIndex(RetrievalError):
    pass


class SingularCovariance(RetrievalError):
    pass


class DuplicateSegmentId(RetrievalError):
    pass


class UnknownSegmentId(RetrievalError):
    pass


class MissingLabels(RetrievalError):
    pass


class InvalidSpec(RetrievalError):
    pass
