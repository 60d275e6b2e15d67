"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class ResolutionFailure(RuntimeError):
    """Adaptive refinement hit the depth limit.

    Attributes
    ----------
    coords : list of tuple
        Centers of the boxes that could not be resolved.
    """

    def __init__(self, message, coords=()):
        super().__init__(message)
        self.coords = list(coords)


class AccuracyFailure(RuntimeError):
    pass


class GeometryFailure(ValueError):
    pass


class StepFailure(RuntimeError):
    """A time step could not be completed.

    Attributes
    ----------
    location : array or None
        Offending grid node, when known.
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class ConfigError(ValueError):
    pass
