"""Exception hierarchy shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(EngineError):
    """Operand shapes are inconsistent with the operation's contract."""


class EmptyShape(EngineError):
    """A tensor extent of zero was requested."""


class BroadcastError(EngineError):
    """Binary op operands match neither the equal-shape nor the channel-broadcast rule."""


class NotScalar(EngineError):
    """backward() was called on a tensor with more than one element."""


class DetachedTensor(EngineError):
    """backward() was called on a tensor that is not linked to a tape."""


class NonFiniteOutput(EngineError):
    """A forward evaluation produced NaN or Inf from finite inputs."""


class PreconditionViolation(EngineError):
    """An argument is outside the documented valid range."""


class OutputCollapsed(EngineError):
    """Convolution geometry yields an output extent below 1."""


class OddExtent(EngineError):
    """Pooling requires even spatial extents."""


class EvenKernel(EngineError):
    """Channel convolution requires an odd kernel length."""


class IndivisibleGroups(EngineError):
    """Channel count is not divisible by the group count."""


class BothBranchesDisabled(EngineError):
    """Attention was configured with neither pooling branch enabled."""


class ConfigInvalid(EngineError):
    """Model or training configuration violates an invariant."""


class NonFiniteLoss(EngineError):
    """Training loss became NaN or Inf; the run is aborted."""


class InvalidLabelValue(EngineError):
    """A label grid contains values outside {0, 1, 2, 4}."""


class DataError(EngineError):
    """Base class for dataset and file-format errors."""


class BadMagic(DataError):
    """File is not a supported single-file NIfTI-1 image."""


class UnsupportedDatatype(DataError):
    """NIfTI datatype code is not one of {2, 4, 16}."""


class TruncatedFile(DataError):
    """File ends before the voxel payload is complete."""


class IoError(DataError):
    """Generic read/write failure."""


class EmptyBrainMask(DataError):
    """A modality has no nonzero voxels to normalize over."""


class PatchLargerThanVolume(DataError):
    """Requested crop patch exceeds the volume extents."""


class TooFewCases(DataError):
    """Fewer cases than folds were provided to the splitter."""


class ExtentTooSmall(DataError):
    """Synthetic case extent is below the supported minimum."""
