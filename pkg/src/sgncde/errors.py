"""Exception hierarchy shared by all modules."""


class SgncdeError(Exception):
    """Base class for library errors."""


class InvalidInputError(SgncdeError, ValueError):
    pass


class NearAntipodalError(SgncdeError, ValueError):
    """Log map requested for a rotation angle too close to pi."""


class Degenerate6DError(SgncdeError, ValueError):
    """6D representation with a zero or parallel column."""


class WindowError(SgncdeError, ValueError):
    """A Savitzky-Golay window could not be built or solved.

    ``index`` is the anchor index of the failing window when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"{message} (anchor {index})")
        self.index = index


class SingularWindowError(WindowError):
    pass


class OutOfSupportError(SgncdeError, ValueError):
    pass


class ConfigError(SgncdeError, ValueError):
    pass


class ShapeError(SgncdeError, ValueError):
    pass


class UsageError(SgncdeError, RuntimeError):
    pass


class StiffnessError(SgncdeError, RuntimeError):
    pass


class DivergenceError(SgncdeError, RuntimeError):
    def __init__(self, message, batch_id=None):
        super().__init__(message if batch_id is None else f"{message} (batch {batch_id})")
        self.batch_id = batch_id
