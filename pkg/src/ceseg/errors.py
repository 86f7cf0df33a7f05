"""Error taxonomy shared across the package.

Every error raised on purpose derives from CesegError so the CLI can map
failures to stable exit codes without string matching.
"""


class CesegError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigurationError(CesegError):
    """Invalid or inconsistent configuration (bad field value, unknown key)."""


class InputError(CesegError):
    """Caller passed data that violates a documented precondition."""


class FormatError(CesegError):
    """A file on disk does not match its declared format."""


class EmptyMaskError(InputError):
    """A surface-based metric was asked to operate on an all-background mask."""


class DegenerateSampleError(InputError):
    """A statistical test has no information left (e.g. all paired differences are zero)."""


class NormalizationError(InputError):
    """Intensity normalization cannot proceed (zero variance input)."""


class TrainingDivergedError(CesegError):
    """Loss became non-finite during optimization."""

    def __init__(self, epoch: int, case_id: str, loss_value: float):
        self.epoch = epoch
        self.case_id = case_id
        self.loss_value = loss_value
        super().__init__(
            f"non-finite loss {loss_value!r} at epoch {epoch} on case {case_id}"
        )
