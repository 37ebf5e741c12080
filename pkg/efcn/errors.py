class EFCNError(Exception):
    """Base class of all errors raised by efcn."""

    exit_code = 1


class ConfigurationError(EFCNError):
    """Invalid run configuration or inconsistent command line arguments."""

    exit_code = 2


class FormatError(EFCNError):
    """A tensor, mask, manifest or checkpoint file could not be decoded."""

    exit_code = 4


class InvalidLabelError(EFCNError):
    """Empty class set or class set outside the frame of discernment."""

    exit_code = 5


class DimensionError(EFCNError):
    """Mass functions or tables defined over frames of different size."""

    exit_code = 6


class ShapeError(EFCNError):
    """Array shapes incompatible with a layer or an architecture."""

    exit_code = 6


class ContractViolation(EFCNError):
    """A documented precondition of an operation does not hold."""

    exit_code = 7


class DegenerateEvidenceError(EFCNError):
    """Mass function with zero total mass cannot be normalized."""

    exit_code = 8


class NonCombinableError(EFCNError):
    """Totally conflicting mass functions (Dempster's rule undefined)."""

    exit_code = 8


class DegenerateLabelError(EFCNError):
    """Soft label whose self-utility is zero."""

    exit_code = 8


class NumericError(EFCNError):
    """An iterative solver did not reach its tolerance."""

    exit_code = 9


class TrainingDivergenceError(EFCNError):
    """Non-finite loss or parameter during training."""

    exit_code = 10


class GradientCheckError(EFCNError):
    """Analytic gradients disagree with finite differences."""

    exit_code = 11


IO_EXIT_CODE = 3
# any exception outside the hierarchy above
UNEXPECTED_EXIT_CODE = 12
