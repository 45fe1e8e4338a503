"""Exception types shared across the toolkit."""


class VoxstreamError(Exception):
    """Base class for all toolkit errors."""


# volume-io
class MissingFile(VoxstreamError):
    pass


class MalformedMeta(VoxstreamError):
    pass


class SizeMismatch(VoxstreamError):
    pass


class IoError(VoxstreamError):
    pass


class ProtocolError(VoxstreamError):
    pass


class InconsistentSliceShape(VoxstreamError):
    pass


class UnsupportedPixelType(VoxstreamError):
    pass


# octree
class NodeLimitExceeded(VoxstreamError):
    pass


class OutOfRange(VoxstreamError):
    pass


# filters
class DtypeMismatch(VoxstreamError):
    pass


class EvenWindowSize(VoxstreamError):
    pass


# connected components
class TooManyComponents(VoxstreamError):
    pass


# random walker
class MissingSeeds(VoxstreamError):
    pass


class NonConvergence(VoxstreamError):
    pass


# quantify / volumes
class ShapeMismatch(VoxstreamError):
    pass


class NonBinaryInput(VoxstreamError):
    pass


# renderer
class ChannelMismatch(VoxstreamError):
    pass


class NonMonotoneKeyframes(VoxstreamError):
    pass


# ensemble
class EmptyEnsemble(VoxstreamError):
    pass


class UnknownName(VoxstreamError):
    pass


class InsufficientSamples(VoxstreamError):
    pass


# similarity / parcoords
class EmptySampleDomain(VoxstreamError):
    pass


class SampleMismatch(VoxstreamError):
    pass


class IncompleteFeatures(VoxstreamError):
    pass


class DegenerateInput(VoxstreamError):
    pass


class TooManyAxes(VoxstreamError):
    pass


class MissingField(VoxstreamError):
    pass


# pipeline / server
class ConfigError(VoxstreamError):
    pass


class StepError(VoxstreamError):
    pass


class BindError(VoxstreamError):
    pass
