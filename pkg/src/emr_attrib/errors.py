"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid or unusable configuration / input data."""


class ShapeError(ValueError):
    """Array shapes do not agree with the model or feature spec."""


class UndefinedMetricError(ValueError):
    """Metric cannot be computed, e.g. AUC with a single class."""


class DivergenceError(RuntimeError):
    """A non-finite value appeared during optimization."""
