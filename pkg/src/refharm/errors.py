"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, dimension)."""


class IntegrityError(ValueError):
    """A scene sample's stored factors do not reproduce its stored images."""


class GenerationError(RuntimeError):
    """The synthetic generator could not produce a valid sample."""


class UndefinedMetricError(ValueError):
    """A metric was requested on an input where it is not defined (e.g. an empty mask)."""


class FormatError(ValueError):
    """A persisted file is malformed, truncated or of the wrong type."""


class IncompatibleVersionError(FormatError):
    """A persisted file was written with an unsupported schema version."""


class ManifestError(ValueError):
    """A manifest row references a missing or invalid file."""


class ConfigurationError(ValueError):
    """A training or evaluation configuration is inconsistent."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite; the last good checkpoint path is attached."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
