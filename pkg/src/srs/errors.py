"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all srs errors."""


class ShapeMismatch(EngineError):
    pass


class InvalidAxis(EngineError):
    pass


class NonScalarLoss(EngineError):
    pass


class GroupDivisibility(EngineError):
    pass


class OddSpatialDim(EngineError):
    pass


class SpatialDivisibility(EngineError):
    pass


class BatchKernelMismatch(EngineError):
    pass


class UnknownVariant(EngineError):
    pass


class EmptyDataset(EngineError):
    pass


class NonBinaryTarget(EngineError):
    pass


class EpochOutOfRange(EngineError):
    pass


class DivisibilityError(EngineError):
    pass


class MissingMask(EngineError):
    pass


class UnsupportedFormat(EngineError):
    pass


class CheckpointMismatch(EngineError):
    pass


class VersionMismatch(EngineError):
    pass


class ChecksumMismatch(EngineError):
    pass


class MissingPhaseOneWeights(UserWarning):
    """Warning: segmentation forward uses an untrained reconstruction encoder."""
