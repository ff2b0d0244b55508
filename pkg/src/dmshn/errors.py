"""Exception types raised across the library.

Every error that callers are expected to catch derives from DmshnError, so
CLI entry points can map any library failure to a one-line diagnostic.
"""


class DmshnError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DmshnError):
    """Operands have incompatible shapes for the requested operation."""


class DimsDiffer(ShapeMismatch):
    """Two images that must share dimensions do not."""


class NonFinite(DmshnError):
    """A value that must be finite is NaN or infinite."""


class NonFiniteGrad(NonFinite):
    """A gradient tensor contains NaN/Inf; the optimizer step is aborted."""


class NonFiniteLoss(NonFinite):
    """The training loss became NaN/Inf; the run is aborted."""


class EmptyTensor(DmshnError):
    """Operation requires a non-empty tensor."""


class NotScalar(DmshnError):
    """backward() was called on a non-scalar tensor."""


class DetachedTensor(DmshnError):
    """backward() was called on a tensor that is not on an active tape."""


class TapeConsumed(DmshnError):
    """backward() was called twice on the same tape."""


class MissingGrad(DmshnError):
    """A parameter has no gradient when the optimizer expected one."""


class OddDimension(DmshnError):
    """downsample2x requires even spatial dimensions."""


class BadTarget(DmshnError):
    """Resize target dimensions must be >= 1."""


class BadDimensions(DmshnError):
    """Input spatial dimensions violate a divisibility requirement."""


class TooSmall(DmshnError):
    """Image is too small for the requested windowed operation."""


class DecodeError(DmshnError):
    """An image file could not be decoded."""


class MissingFile(DmshnError):
    """A referenced file does not exist."""


class EmptyDataset(DmshnError):
    """The dataset contains no usable records."""


class CheckpointStageMismatch(DmshnError):
    """Checkpoint was produced by a different training stage than required."""


class BadMagic(DmshnError):
    """File is not a checkpoint (magic bytes do not match)."""


class VersionUnsupported(DmshnError):
    """Checkpoint format version is not supported by this build."""


class ShapeMismatchOnLoad(DmshnError):
    """A stored tensor's shape does not match the requesting model config."""


class NoPairsFound(DmshnError):
    """Directory evaluation found no matching prediction/ground-truth pairs."""


class ConfigError(DmshnError):
    """Invalid or incomplete run configuration."""
