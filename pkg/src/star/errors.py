"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Malformed input data (CSV parsing, schema mismatch, shape problems)."""


class SchemaError(DataError):
    """Schema sidecar names a column that does not exist, or is malformed."""


class MetricError(ValueError):
    """Metric undefined for the given labels (e.g. single-class input)."""


class CheckpointError(RuntimeError):
    """Checkpoint file corrupt, version-mismatched, or mode-mismatched."""
