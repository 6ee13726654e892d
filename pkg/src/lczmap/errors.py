"""Exception hierarchy. Everything raised on bad data derives from LczError."""


class LczError(Exception):
    """Base class for data and model errors (CLI exit code 1)."""


class MalformedRasterError(LczError):
    pass


class OutOfBoundsError(LczError):
    pass


class NodataContaminationError(LczError):
    pass


class GeometryMismatchError(LczError):
    pass


class DatasetFormatError(LczError):
    pass


class ModelFormatError(LczError):
    pass


class ConfigError(LczError):
    pass


class TrainingDivergenceError(LczError):
    """Raised when the training loss becomes NaN or infinite."""
