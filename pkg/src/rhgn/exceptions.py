"""Exception hierarchy shared by every rhgn module."""


class RHGNError(Exception):
    """Base class for all errors raised by this package."""


# graph ingestion / manipulation
class GraphError(RHGNError, ValueError):
    pass


class MissingNode(GraphError):
    pass


class DuplicateId(GraphError):
    pass


class MalformedLine(GraphError):
    pass


class EmptyGraph(GraphError):
    pass


class ReservedSuffixCollision(GraphError):
    pass


class UnknownRelation(GraphError):
    pass


class DimensionMismatch(GraphError):
    pass


class BadRatios(GraphError):
    pass


class EmptyLabelSet(GraphError):
    pass


class LabelError(GraphError):
    pass


# numeric kernels
class KernelError(RHGNError, ValueError):
    pass


class NonFiniteInput(KernelError):
    pass


class ShapeMismatch(KernelError):
    pass


class EmptySegment(KernelError):
    pass


class NonDeterministicLoss(KernelError):
    pass


# model
class BadDims(RHGNError, ValueError):
    pass


class DimMismatch(RHGNError, ValueError):
    pass


class UnknownRelationParams(RHGNError, KeyError):
    pass


# training / evaluation
class BadConfig(RHGNError, ValueError):
    pass


class EmptyMask(RHGNError, ValueError):
    pass


class LabelOutOfRange(RHGNError, ValueError):
    pass


class StepOutOfRange(RHGNError, ValueError):
    pass


class EmptySplit(RHGNError, ValueError):
    pass


class DivergedLoss(RHGNError, FloatingPointError):
    pass


class CheckpointError(RHGNError, ValueError):
    pass


# synthetic data / cli
class NoPurchases(RHGNError, ValueError):
    pass


class UnknownNodeId(RHGNError, KeyError):
    pass
