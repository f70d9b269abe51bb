"""Exception hierarchy.

Everything raised for bad user input derives from :class:`PowerTraceError` so
the CLI can map it to exit code 1.
"""


class PowerTraceError(Exception):
    """Base class for user-facing errors."""


class FormatError(PowerTraceError):
    """Malformed trace, request log or scenario file."""


class BundleError(PowerTraceError):
    """A model bundle could not be read or written."""


class BundleVersionError(BundleError):
    pass


class FitError(PowerTraceError):
    """A model could not be fitted to the supplied data."""


class DataError(PowerTraceError):
    pass


class TrainingError(PowerTraceError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class AggregationError(PowerTraceError):
    pass


class ResampleError(PowerTraceError):
    pass


class MetricError(PowerTraceError):
    """A metric is undefined for the given traces."""
