class UILabError(Exception):
    pass


class ValidationError(UILabError, ValueError):
    """Bad shapes, bad config values, bad files. CLI exit code 1."""


class NumericalError(UILabError, ArithmeticError):
    """Non-finite values or degenerate geometry. CLI exit code 2."""


class NoSignalError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class CheckpointError(ValidationError):
    pass
