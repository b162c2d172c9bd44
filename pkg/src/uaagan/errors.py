"""Exception hierarchy shared by every uaagan module."""


class UAAError(Exception):
    """Base class for all library errors."""


class ConfigurationError(UAAError, ValueError):
    """An invalid spec, preset or hyper-parameter combination."""


class ShapeError(UAAError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class DomainError(UAAError, ValueError):
    """Inputs fall outside the mathematical domain of an operation."""


class TrainingError(UAAError, RuntimeError):
    """Training failed to converge or produced non-finite values."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(UAAError, IOError):
    """A checkpoint archive is corrupt, truncated or of the wrong version."""


class IncompatibleCheckpointError(CheckpointError):
    """A checkpoint was produced for a different architecture."""


class ContaminationError(UAAError, ValueError):
    """Features from one target were compared against an index of another."""


class ManifestError(UAAError, ValueError):
    """Dataset manifest rows are inconsistent or reference missing files."""
