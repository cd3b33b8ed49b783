"""Exception types shared across the pipeline."""


class SpeechQAError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(SpeechQAError):
    """Invalid configuration value or file."""


class DataError(SpeechQAError):
    """Bad input data: missing files, malformed manifests, shape mismatches."""


class CannotNormalizeError(DataError):
    """Signal has no energy to normalize."""


class NoActiveFramesError(DataError):
    """Operation needs speech-active frames but the VAD found none."""


class FormatError(DataError):
    """Corrupt or truncated binary container."""


class VersionMismatchError(FormatError):
    """Container version byte does not match the reader."""


class TrainingDivergedError(SpeechQAError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
