"""Exception classes used across :mod:`pydorf`.

The command line interface maps these onto exit codes: data problems
(:class:`InvalidInputError`, :class:`DataFormatError`) exit with 2 and
numerical failures (:class:`NumericError`) exit with 3.
"""


class DorfError(Exception):
    """Base class for all pydorf errors."""

    exit_code = 2


class InvalidInputError(DorfError, ValueError):
    """An input violates a precondition: shape, range or finiteness."""


class DataFormatError(DorfError, ValueError):
    """A file or a CSV row cannot be parsed."""


class NumericError(DorfError, ArithmeticError):
    """A numerical step failed, such as a singular linear system."""

    exit_code = 3


class TrainingError(NumericError):
    """Training diverged.

    Args:
        message: Description of the failure.
        epoch: The epoch, counted from 1, at which the failure was detected.
    """

    def __init__(self, message: str, epoch: int):
        super().__init__(f'{message} (epoch {epoch})')
        self.epoch = epoch


class StageError(DorfError):
    """Wraps an error raised while processing one trial in one pipeline stage."""

    def __init__(self, trial_id: str, stage: str, cause: Exception):
        super().__init__(f'trial {trial_id}, stage {stage}: {cause}')
        self.trial_id = trial_id
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, 'exit_code', 2)
