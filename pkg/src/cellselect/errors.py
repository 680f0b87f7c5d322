"""Error taxonomy shared across the toolkit.

Every error carries a stable ``code`` string that the CLI serializes into its
machine-readable error JSON.
"""


class CellSelectError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class ShapeMismatchError(CellSelectError):
    code = "shape_mismatch"


class DimensionError(CellSelectError):
    """Input dims not divisible by the network downsampling factor."""

    code = "dimension_mismatch"


class NonFiniteError(CellSelectError):
    """NaN/Inf encountered in weights or gradients."""

    code = "non_finite"


class DegenerateDatasetError(CellSelectError):
    """Class weight undefined: the dataset has no foreground pixels."""

    code = "degenerate_dataset"


class ImageTooSmallError(CellSelectError):
    code = "image_too_small"


class ConstantImageError(CellSelectError):
    code = "constant_image"


class BudgetExceedsPoolError(CellSelectError):
    code = "budget_exceeds_pool"


class EmptySourceError(CellSelectError):
    code = "empty_source"


class AllZeroDifferencesError(CellSelectError):
    code = "all_differences_zero"


class UnknownTargetError(CellSelectError):
    code = "unknown_target"


class MissingLabelError(CellSelectError):
    code = "missing_label"


class MissingArtifactError(CellSelectError):
    code = "missing_artifact"


class MalformedConfigError(CellSelectError):
    code = "malformed_config"


class SupportTestOverlapError(CellSelectError):
    """A selected support patch comes from a test image."""

    code = "support_test_overlap"


class StageError(CellSelectError):
    """Wraps a failure with pipeline provenance (stage, target, split)."""

    code = "stage_failure"

    def __init__(self, message, stage, target=None, split=None, cause=None):
        super().__init__(message, stage=stage, target=target, split=split)
        self.stage = stage
        self.target = target
        self.split = split
        self.cause = cause
        if cause is not None and isinstance(cause, CellSelectError):
            self.code = cause.code
