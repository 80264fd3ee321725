"""Exception hierarchy shared by every component."""


class SynergicError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(SynergicError, ValueError):
    """Invalid run, network or loss configuration."""


class DataModelError(SynergicError, ValueError):
    """A value type was constructed with data violating its invariants."""


class ManifestIOError(SynergicError, OSError):
    """A manifest, volume or sidecar file could not be read or written."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class IngestionError(SynergicError, ValueError):
    """Bad rater annotations or consensus input."""


class PreprocessError(SynergicError, ValueError):
    """Preprocessing could not be applied to the given volume."""


class LossError(SynergicError, ValueError):
    """Loss inputs with incompatible shapes or ranges."""


class TrainingError(SynergicError, ValueError):
    """Training or fold construction could not proceed."""


class TrainingDivergedError(TrainingError):
    """The loss became non-finite; a diagnostic snapshot was written."""

    def __init__(self, message, snapshot_path=None):
        self.snapshot_path = str(snapshot_path) if snapshot_path else None
        if self.snapshot_path:
            message = f"{message} (snapshot: {self.snapshot_path})"
        super().__init__(message)


class EvaluationError(SynergicError, ValueError):
    """Metric inputs that cannot be scored."""


class RetrievalError(SynergicError, ValueError):
    """Retrieval was asked for something the database cannot answer."""


class LeakageError(RetrievalError):
    """Test nodules overlap the retrieval database."""
