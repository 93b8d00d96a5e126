"""Exception types shared across the package."""


class LayerwiseError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(LayerwiseError, ValueError):
    pass


class NotPositiveDefinite(LayerwiseError, ArithmeticError):
    pass


class NotSymmetric(LayerwiseError, ValueError):
    pass


class NonFinite(LayerwiseError, ArithmeticError):
    pass


class StaleTape(LayerwiseError, RuntimeError):
    """Raised when a tape no longer holds the activations it recorded."""


class RankDeficient(LayerwiseError, ArithmeticError):
    """The kernel matrix lost full rank, so the stability hypothesis fails."""


class ConfigInvalid(LayerwiseError, ValueError):
    pass


class IoFailure(LayerwiseError, OSError):
    pass


class VerificationFailure(LayerwiseError, AssertionError):
    pass
