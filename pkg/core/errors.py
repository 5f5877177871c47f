"""
Exception hierarchy for evoconv

Library code raises these; main.run() maps them onto exit codes:
ValidationError -> 1, DataError -> 2.
"""


class EvoconvError(Exception):
    """Base class for every error raised by evoconv"""

    exit_code = 1


class ValidationError(EvoconvError):
    """Bad input values, shapes, labels or configuration"""

    exit_code = 1


class DataError(EvoconvError):
    """Unreadable, unwritable or corrupted files"""

    exit_code = 2


# Audio

class WavHeaderError(DataError):
    """RIFF/WAVE header is missing or malformed"""


class ChannelCountError(ValidationError):
    """Audio is not mono"""


class UnsupportedEncodingError(ValidationError):
    """Sample encoding other than PCM16 or float32"""


class SampleRateError(ValidationError):
    """Sample rate below the supported floor or not the analysis rate"""


class OutputPathError(DataError):
    """Destination cannot be written"""


class EmptySignalError(ValidationError):
    """Signal has no samples"""


class SignalTooShortError(ValidationError):
    """Signal is shorter than one analysis frame"""


# Feature archives

class ArchiveFormatError(DataError):
    """Bad magic or unsupported container version"""


class ArchiveCorruptionError(DataError):
    """Truncated payload or shape/payload mismatch"""


# Numerics

class InvalidParameterError(ValidationError):
    """Parameter outside its documented range"""


class FrameCountMismatchError(ValidationError):
    """Parallel frame sequences disagree in length"""


class UnvoicedContourError(ValidationError):
    """F0 contour has no voiced frame"""


class DegenerateVarianceError(ValidationError):
    """Variance too small to normalise or correlate"""


class ContourTooShortError(ValidationError):
    """Contour shorter than the CWT minimum"""


class ShapeMismatchError(ValidationError):
    """Tensor shape disagrees with the layer or parameter it meets"""


class MissingCacheError(EvoconvError):
    """Backward pass called without a forward cache"""


class NonFiniteError(EvoconvError):
    """NaN or Inf produced during computation"""


# Models and training

class ConditioningError(ValidationError):
    """Malformed one-hot emotion ID or wrong conditioning width"""


class BatchTooSmallError(ValidationError):
    """Training batch has fewer than two frames"""


class EmptyBatchError(ValidationError):
    """Loss requested over an empty batch"""


class CorpusError(ValidationError):
    """Corpus cannot support the requested training run"""


class VocabularyError(ValidationError):
    """Unknown emotion label or mismatched vocabularies"""


class RoleMismatchError(ValidationError):
    """Checkpoint used in the wrong pipeline role"""


class MissingModelError(ValidationError):
    """A required checkpoint was not supplied"""


# Configuration and command line

class ConfigError(ValidationError):
    """Unknown key or invalid value in configuration"""


class UsageError(ValidationError):
    """Unknown subcommand or flag"""
