"""Exception taxonomy shared across the package."""


class LifqError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LifqError):
    """Operands with incompatible shapes; the message names both shapes."""


class ConfigError(LifqError):
    """Invalid configuration value (e.g. top-k larger than the pool)."""


class RoutingError(LifqError):
    """Routing produced an unusable state, such as an empty top-k set."""


class FormatError(LifqError):
    """A serialized file does not match the expected binary layout."""


class OracleError(LifqError):
    """The finite-difference oracle hit a non-finite function value."""


class MetricError(LifqError):
    """A correlation metric is undefined for the given inputs."""


class TrainingAbort(LifqError):
    """Training stopped on a non-finite loss or gradient."""
