"""Exception hierarchy shared by every ikmr module."""


class IKMRError(Exception):
    """Base class for all ikmr errors."""


class ValidationError(IKMRError, ValueError):
    """Input data or configuration failed validation."""


class ZeroQuaternion(ValidationError):
    pass


class InvalidSkeleton(ValidationError):
    pass


class InvalidMotion(ValidationError):
    pass


class FormatVersionError(ValidationError):
    pass


class SkeletonMismatch(ValidationError):
    pass


class EmptyEndEffectorSet(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class InvalidKernel(ValidationError):
    pass


class NotScalar(ValidationError):
    pass


class AdjacencyMismatch(ValidationError):
    pass


class IncompleteMap(ValidationError):
    pass


class WindowLengthMismatch(ValidationError):
    pass


class TopologyMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class LimitsMismatch(ValidationError):
    pass


class NonPositiveSigma(ValidationError):
    pass


class InvalidGamma(ValidationError):
    pass


class TooShort(ValidationError):
    pass


class ZeroVariance(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass
