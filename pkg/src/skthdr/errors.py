"""Exception types raised across the package."""


class ShapeMismatch(ValueError):
    pass


class DomainError(ValueError):
    """Input outside the domain where an operation is defined."""


class NotScalar(ValueError):
    pass


class GraphConsumed(RuntimeError):
    """backward() called on a graph whose buffers were already released."""


class EmptyRegion(ValueError):
    pass


class NoValidMasks(ValueError):
    pass


class FormatError(ValueError):
    pass


class StageCountMismatch(ValueError):
    pass


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass
