"""Exception types shared across the package.

Every error raised deliberately by this package derives from DeskError so
callers can catch one base type at the CLI boundary.
"""


class DeskError(Exception):
    """Base class for all package errors."""


class ConfigError(DeskError):
    """Bad run configuration: unknown key, unparsable value, missing path."""


# tensor engine

class ShapeMismatchError(DeskError):
    """Operands have incompatible shapes for the requested op."""


class UnsupportedOpError(DeskError):
    """apply_op received an op kind that is not in the dispatch table."""


class NonFiniteError(DeskError):
    """A NaN or Inf appeared while strict non-finite checking was enabled."""


class NotScalarError(DeskError):
    """backward() was called on a tensor with more than one element."""


# model configuration

class UnknownModelError(DeskError):
    """Requested model name is not in the registry."""


class IndivisibleImageError(DeskError):
    """Image side is not a multiple of the patch size."""


class BadGridError(DeskError):
    """Token count does not factor into the expected grid."""


class MissingWeightError(DeskError):
    """A forward pass needed a named weight that the weight dict lacks."""


class BadRatioError(DeskError):
    """Masking ratio outside [0, 1)."""


class PlanMismatchError(DeskError):
    """Mask plan token count disagrees with the encoder grid."""


# heads and losses

class BadSizeError(DeskError):
    """Requested output size is not representable by the head."""


class ClassOutOfRangeError(DeskError):
    """Segmentation target contains a class id outside [0, C)."""


class DegenerateDepthError(DeskError):
    """Depth normalization asked for on a constant (max == min) region."""


class EmptyMaskError(DeskError):
    """A loss or metric was asked to reduce over an empty pixel mask."""


class NonPositiveDepthError(DeskError):
    """Depth input contains negative values where positives are required."""


# data generation

class EmptySceneError(DeskError):
    """No figure pixel landed inside the frame."""


class TooSmallBackgroundError(DeskError):
    """Background image is smaller than the render target."""


class DegenerateCropError(DeskError):
    """Augmentation crop left zero human pixels."""


# training

class StepOutOfRangeError(DeskError):
    """Learning-rate query outside [0, total_steps]."""


class BadDecayError(DeskError):
    """Layer-wise decay factor outside (0, 1]."""


class EmptyManifestError(DeskError):
    """Training requested on a manifest with no records."""


class IncompatibleCheckpointError(DeskError):
    """Checkpoint architecture does not match the requested model."""


class IOFailureError(DeskError):
    """Filesystem failure, or refusing to overwrite without permission."""


class CorruptCheckpointError(DeskError):
    """Checkpoint bytes are truncated, misversioned, or carry unknown tensors."""


# evaluation

class DegenerateBoxError(DeskError):
    """Person box has non-positive width or height."""


class NoLabeledKeypointsError(DeskError):
    """OKS requested against a ground truth with zero labeled keypoints."""
