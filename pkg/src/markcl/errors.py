"""Exception types raised across the package."""


class MarkError(Exception):
    """Base class for every error raised by markcl."""


class DimensionError(MarkError, ValueError):
    pass


class ParameterError(MarkError, ValueError):
    pass


class BatchSizeError(MarkError, ValueError):
    pass


class LabelError(MarkError, ValueError):
    pass


class ContractError(MarkError, RuntimeError):
    """A caller violated a documented precondition (e.g. backward on a non-scalar)."""


class NonFiniteError(MarkError, FloatingPointError):
    pass


class MissingTaskError(MarkError, KeyError):
    pass


class EmbeddingLookupError(MarkError, IndexError):
    pass


class SamplingError(MarkError, ValueError):
    pass


class GenerationError(MarkError, ValueError):
    pass


class PartitionError(MarkError, ValueError):
    pass


class MetricError(MarkError, ValueError):
    """Metric undefined for the given accuracy matrix."""


class FormatError(MarkError, ValueError):
    """Malformed binary file (bad magic, bad layout, duplicate names...)."""


class LengthError(FormatError):
    """File is truncated or record counts disagree."""


class UnsupportedVersionError(FormatError):
    pass


class ConfigError(MarkError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
