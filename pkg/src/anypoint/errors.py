class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidStateError(RuntimeError):
    """Internal state is corrupt (non-finite memory, shape change mid-session...)."""


class ConfigError(InvalidInputError):
    """A configuration value is out of its documented range."""


class TrackFileError(ValueError):
    """A track file could not be parsed. Carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GradCheckError(AssertionError):
    """Analytic and numeric gradients disagree on one or more modules."""

    def __init__(self, message, modules=()):
        self.modules = tuple(modules)
        super().__init__(message)
