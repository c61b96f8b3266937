"""Exception taxonomy shared across the package.

Every failure surface raises a distinct class so callers (and the CLI exit-code
mapping) can tell usage problems from numeric/runtime ones.
"""


class AttnflareError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AttnflareError, ValueError):
    """Tensor extents incompatible with the requested operation."""


class NumericError(AttnflareError, ArithmeticError):
    """Non-finite values detected where finite math is required."""


class DegenerateVarianceError(NumericError):
    """Batch statistics undefined (fewer than two elements per channel)."""


class StaleGraphError(AttnflareError, RuntimeError):
    """backward() called again without a fresh forward pass."""


class LabelError(AttnflareError, ValueError):
    """Class label outside the supported set."""


class ConfigError(AttnflareError, ValueError):
    """Invalid model/training/run configuration."""


class DataError(AttnflareError, ValueError):
    """Catalog, manifest, or image content violates its contract."""


class FormatError(DataError):
    """Malformed file on disk (image, manifest, checkpoint)."""


class FoldError(DataError):
    """Cross-validation folds cannot be formed."""


class ImbalanceError(DataError):
    """Class-balance treatment impossible (e.g. zero minority samples)."""


class GenerationError(AttnflareError, RuntimeError):
    """Synthetic corpus generation could not satisfy its constraints."""


class OptimizerError(AttnflareError, RuntimeError):
    """Optimizer invoked on parameters in an unusable state."""


class DivergenceError(AttnflareError, RuntimeError):
    """Training produced a non-finite loss."""


class UndefinedScoreError(AttnflareError, ValueError):
    """Skill score requested on a confusion matrix where it is undefined."""


class GeometryError(AttnflareError, ValueError):
    """Degenerate box or region geometry."""


class CompatibilityError(AttnflareError, ValueError):
    """Checkpoint and configuration disagree on shapes or model kind."""
