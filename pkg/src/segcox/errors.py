"""Exception types shared across the package."""


class SegcoxError(Exception):
    """Base class for all segcox failures."""


class EstimationError(SegcoxError):
    """An estimation stage failed: divergence, singular information,
    inadmissible variance estimate, or a bootstrap with too many failures.

    The simulation harness treats this as a non-converged replicate.
    """


class ConfigError(SegcoxError):
    """Invalid scenario or run configuration."""


class SchemaError(SegcoxError):
    """A CSV or JSON input does not match the documented schema."""
