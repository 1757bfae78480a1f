"""Exception hierarchy shared by every mammnet module."""


class MammNetError(Exception):
    """Base class for all errors raised by mammnet."""


class ShapeError(MammNetError, ValueError):
    """An array or tensor has a shape the operation cannot accept."""


class ConfigError(MammNetError, ValueError):
    """A configuration value violates its documented invariant."""


class CheckpointError(MammNetError):
    """A checkpoint file is unreadable, corrupt or from another format version."""


class ConfigMismatchError(CheckpointError):
    """A checkpoint was written with a model config that differs from the expected one."""


class DatasetError(MammNetError):
    """A dataset or prediction directory is missing files or violates the manifest schema."""


class MalformedMaskError(DatasetError):
    """A run-length encoded mask does not decode to the declared image shape."""


class TrainingDivergedError(MammNetError):
    """The training loss became non-finite."""

    def __init__(self, step, last_finite_loss):
        self.step = step
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step}; last finite loss was {last_finite_loss!r}"
        )
