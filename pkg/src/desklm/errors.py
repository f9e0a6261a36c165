"""Exception hierarchy shared across the package.

Anticipated failures raise a DeskLMError subclass with a message that names
the operation and the offending values; the CLI maps these to exit code 2
instead of a stack trace.
"""


class DeskLMError(Exception):
    """Base class for all anticipated errors."""


class ShapeError(DeskLMError):
    """Operand shapes (or dtypes) do not conform for a primitive."""


class NumericError(DeskLMError):
    """An operation produced a non-finite value."""


class AutodiffError(DeskLMError):
    """Misuse of the tape: non-scalar root, repeated backward, etc."""


class ConfigError(DeskLMError):
    """Invalid configuration value."""


class VocabError(DeskLMError):
    """Unknown or out-of-range token id."""


class ContextLengthError(DeskLMError):
    """Sequence (prefix + tokens) exceeds the model's max context."""


class ModalityError(DeskLMError):
    """Input modality the model does not support (e.g. audio)."""


class CheckpointError(DeskLMError):
    """Base class for checkpoint load/save failures."""


class CorruptionError(CheckpointError):
    """Checkpoint blob failed its checksum or is truncated."""


class ManifestError(CheckpointError):
    """Checkpoint manifest is malformed or missing tensors."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""
