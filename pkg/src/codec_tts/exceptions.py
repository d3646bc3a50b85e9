class CodecTTSError(Exception):
    """Base class for package errors."""


class DataError(CodecTTSError, ValueError):
    """Bad input data: unreadable audio, invalid ids, empty corpora and so on."""


class OverLengthError(DataError):
    """Input exceeds a hard sequence cap."""


class CheckpointError(CodecTTSError):
    """A model file is missing, malformed or has the wrong version."""


class TrainingDivergedError(CodecTTSError, FloatingPointError):
    """A loss became non-finite during training."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
