"""
Error types for w2vj.

Every failure the toolkit reports on purpose derives from ``W2VJError`` and
also from the closest builtin, so callers that only know ``ValueError`` or
``RuntimeError`` still catch them.
"""

from typing import Optional


class W2VJError(Exception):
    """Base class for all w2vj errors."""


class ConfigError(W2VJError, ValueError):
    """Invalid or unknown configuration key/value."""


class NumericsError(W2VJError, ArithmeticError):
    """Failure inside the differentiable array core."""


class NonFiniteError(NumericsError):
    """An operation produced NaN or Inf."""


class ShapeError(NumericsError, ValueError):
    """Operands have incompatible dimensions."""


class MissingGradientError(NumericsError):
    """An optimizer step was requested without populated gradients."""


class NonDeterministicError(NumericsError):
    """A fragment returned different values for the same seed."""


class FeatureError(W2VJError, ValueError):
    """Invalid waveform or feature matrix."""


class ManifestError(W2VJError, ValueError):
    """Malformed manifest file or entry."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VocabularyError(W2VJError, ValueError):
    """Vocabulary cannot be built or does not cover a transcript."""


class InadmissibleTargetError(W2VJError, ValueError):
    """CTC target cannot be aligned to the available frames."""


class MaskError(W2VJError, ValueError):
    """Mask plan is invalid or too small for the loss."""


class CheckpointError(W2VJError, RuntimeError):
    """Base class for checkpoint persistence failures."""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or unsupported format version."""


class ChecksumError(CheckpointError):
    """Payload does not match its trailing CRC32 (corrupt or truncated)."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoints disagree on parameter names or shapes."""


class StoreLockedError(CheckpointError):
    """Another writer holds the checkpoint store lock."""


class ScoringError(W2VJError, ValueError):
    """Error rates requested for a corpus with no reference tokens."""
