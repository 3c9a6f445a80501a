"""Exception hierarchy shared by every stage of the pipeline."""


class PhonocardError(Exception):
    """Base class; the CLI turns any subclass into a one-line diagnostic."""


class FormatError(PhonocardError):
    pass


class UnsupportedChannels(PhonocardError):
    pass


class EmptyRecording(PhonocardError):
    pass


class LabelError(PhonocardError, ValueError):
    pass


class DuplicateRecord(PhonocardError):
    pass


class InsufficientData(PhonocardError, ValueError):
    pass


class UpsampleUnsupported(PhonocardError, ValueError):
    pass


class SignalTooShort(PhonocardError, ValueError):
    pass


class NoCyclesFound(PhonocardError):
    pass


class DomainError(PhonocardError, ValueError):
    pass


class ResolutionError(PhonocardError, ValueError):
    pass


class ShapeError(PhonocardError, ValueError):
    pass


class DegenerateBatch(PhonocardError, ValueError):
    pass


class StateError(PhonocardError):
    pass


class ConfigError(PhonocardError, ValueError):
    pass


class ClassMissing(PhonocardError, ValueError):
    pass


class DivergenceError(PhonocardError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CheckpointError(PhonocardError):
    pass
