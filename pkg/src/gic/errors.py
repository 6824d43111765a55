"""Exception hierarchy shared across the package."""


class GicError(Exception):
    """Base class for all package errors."""


class AlignmentError(GicError):
    """Parameter trees are not structurally compatible for blending."""


class CoefficientError(GicError):
    """Interpolation coefficients violate the simplex constraints."""


class FormatError(GicError):
    """Checkpoint container is malformed (magic, version, truncation, shapes)."""


class IntegrityError(GicError):
    """Checkpoint payload checksum does not match."""


class DataMissing(GicError):
    """A required base dataset is not available on disk."""


class ConfigError(GicError):
    """Invalid configuration or invalid combination of options."""


class BlankImage(GicError):
    """Image has no foreground pixels to derive an attribute from."""


class AllBlank(GicError):
    """Every image in a batch was blank."""


class ClassOutOfRange(GicError):
    """Class condition outside [0, num_classes)."""


class ClassMismatch(GicError):
    """Style codes being mixed carry different class conditions."""


class RangeError(GicError):
    """Crossover index outside [0, num_slots]."""


class ShapeError(GicError):
    """Array shape does not match what the architecture expects."""


class DivergenceError(GicError):
    """Training produced a non-finite loss."""


class TooFewSamples(GicError):
    """Not enough samples to estimate feature statistics."""


class DimensionMismatch(GicError):
    """Feature statistics or histograms have incompatible dimensions."""


class EmptyEnv(GicError):
    """An operation over environments received none."""


class DiskError(GicError):
    """Failed to persist an artifact."""


class StageError(GicError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
