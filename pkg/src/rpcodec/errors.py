"""Exception hierarchy shared by every subpackage."""


class RPCodecError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(RPCodecError, ValueError):
    """A value is outside its documented range or has the wrong shape."""


class UnsupportedDegradationError(ValidationError):
    """The degradation kind is not one of the known task types."""


class ConfigurationError(RPCodecError, ValueError):
    """Inconsistent configuration, checkpoint or call arguments."""


class ModelSupportError(RPCodecError, ValueError):
    """A symbol has zero probability under the entropy model."""


class BitstreamError(RPCodecError, ValueError):
    """A bitstream could not be parsed or decoded."""


class NoOverlapError(RPCodecError, ValueError):
    """Two RP curves do not share a quality (or log-rate) interval."""


class MonotonicityError(RPCodecError, ValueError):
    """Quality is not strictly monotone where an inverse fit is needed."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericalFailureError(RPCodecError, RuntimeError):
    """NaN or Inf appeared during an iterative computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(RPCodecError, RuntimeError):
    """Training could not start or aborted."""


class SchemaError(RPCodecError, ValueError):
    """A CSV/JSON input does not follow the expected schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingScoreError(RPCodecError, KeyError):
    """An external score file has no entry for a requested key."""

    def __str__(self):
        return str(self.args[0]) if self.args else "missing score"
