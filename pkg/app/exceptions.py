"""
Error Taxonomy
Every failure the library raises on purpose, with the CLI exit code it maps to
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


class SopError(Exception):
    """Base class for all library errors"""
    exit_code = EXIT_RUNTIME


# ----------------------------------------------------------------------------
# numerics
# ----------------------------------------------------------------------------

class ZeroRow(SopError, ValueError):
    """A row norm fell below the normalization threshold"""


class NonPositiveTemperature(SopError, ValueError):
    """A softmax temperature was zero or negative"""


class LengthMismatch(SopError, ValueError):
    """Two probability vectors have different lengths"""


class KTooLarge(SopError, ValueError):
    """top-k requested more entries than a row holds"""


class ShapeMismatch(SopError, ValueError):
    """Operand shapes are incompatible"""


class NonFiniteGradient(SopError, ArithmeticError):
    """A gradient check produced NaN or Inf"""


# ----------------------------------------------------------------------------
# memory / objective / model
# ----------------------------------------------------------------------------

class DimMismatch(SopError, ValueError):
    """Embedding width does not match the bank or prototype width"""


class KExceedsFill(SopError, ValueError):
    """More anchors requested than the bank holds"""


class KTooLargeForBank(SopError, ValueError):
    """Neighbourhood size k+1 exceeds the bank fill"""


class EmptyViews(SopError, ValueError):
    """A loss received no views or no valid view pairs"""


class MaskLengthMismatch(SopError, ValueError):
    """Mask length does not match the number of patch tokens"""


class StructureMismatch(SopError, ValueError):
    """Teacher and student parameter sets differ in names or shapes"""


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

class IoError(SopError, OSError):
    """A file could not be read or written"""
    exit_code = EXIT_IO


class BadMagic(IoError, ValueError):
    """Dataset file does not start with the SOPD magic"""


class TruncatedFile(IoError, ValueError):
    """Dataset file ends before its declared payload"""


class VersionUnsupported(IoError, ValueError):
    """Dataset file version is not understood"""


# ----------------------------------------------------------------------------
# trainer / evalkit / cli
# ----------------------------------------------------------------------------

class NonFiniteLoss(SopError, ArithmeticError):
    """Training produced a NaN/Inf loss; carries a diagnostic dump"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ResumeMismatch(SopError, ValueError):
    """Checkpoint was written under a different configuration"""


class CheckpointCorrupt(SopError, ValueError):
    """Checkpoint directory is missing files or has malformed contents"""


class EmptyTable(SopError, ValueError):
    """A feature table has no rows"""


class NoValidK(SopError, ValueError):
    """No k in a sweep fits the train split"""


class ConfigInvalid(SopError, ValueError):
    """A configuration field is unknown or violates an invariant"""
    exit_code = EXIT_CONFIG

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class GridTooLarge(SopError, ValueError):
    """An ablation grid expands to more cells than the configured cap"""
    exit_code = EXIT_CONFIG
