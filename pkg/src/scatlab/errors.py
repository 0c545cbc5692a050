"""Exception types shared across the toolkit."""


class ScatlabError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(ScatlabError):
    """Invalid grid, scene, or run configuration."""


class GeometryError(ScatlabError):
    """Sensor/domain layout violates a geometric requirement."""


class DomainError(ScatlabError):
    """An operation was applied outside its mathematical domain."""


class DataError(ScatlabError):
    """Measured or simulated data violates a precondition."""


class ParseError(ScatlabError):
    """A dataset file could not be parsed.

    Attributes
    ----------
    details : list of str
        One entry per offending record or group.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = list(details) if details else []


class DivergenceError(ScatlabError):
    """The inversion cost grew past the divergence guard.

    Carries the partial state so callers can inspect the trajectory.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
