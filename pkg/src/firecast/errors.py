"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
file-format problems exit 3, numerical failures exit 4.
"""


class FirecastError(Exception):
    """Base class for all firecast errors."""

    exit_code = 1


class ConfigurationError(FirecastError):
    """Invalid run configuration, dims, or violated API precondition."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """Tensor shapes do not conform."""


class UnsupportedVariantError(ConfigurationError):
    """Operation requested on a model variant lacking the needed network."""


class LengthError(ConfigurationError):
    """Sequence too short for the requested window."""


class SamplingError(ConfigurationError):
    """Replay buffer cannot satisfy a sampling request."""


class ComparisonError(ConfigurationError):
    """Evaluation reports are not comparable."""


class FormatError(FirecastError):
    """Malformed binary container or raster input."""

    exit_code = 3


class IngestionError(FormatError):
    """Inconsistent or unreadable raster ingestion inputs."""


class DomainError(FirecastError):
    """Numeric argument outside its mathematical domain."""

    exit_code = 4


class MetricUndefinedError(DomainError):
    """Metric has no defined value for the given inputs."""


class TrainingError(FirecastError):
    """Numerical failure during optimization."""

    exit_code = 4
