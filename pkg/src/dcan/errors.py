"""Exception types shared across the package."""


class DcanError(Exception):
    """Base class for all package errors."""


class ShapeError(DcanError):
    """Tensor dimensions do not satisfy an operation's contract."""


class NumericError(DcanError):
    """A non-finite value appeared where finiteness is required."""


class FormatError(DcanError):
    """A dataset or artifact file is malformed."""


class ConfigError(DcanError):
    """A configuration value is invalid or inconsistent."""


class CapabilityError(DcanError):
    """The requested operation is not applicable to the given data."""


class EmptyDictionaryError(DcanError):
    """A confounder dictionary has no usable rows."""


class LeakageError(DcanError):
    """Dictionaries were built from data outside the training split."""


class UndefinedMetricError(DcanError):
    """A metric has no defined value on the given inputs."""


class PrerequisiteError(DcanError):
    """A pipeline step is missing an upstream artifact."""
