"""Exception hierarchy shared by all kercop modules."""


class KercopError(Exception):
    """Base class for every error raised by kercop."""


class InvalidParameterError(KercopError, ValueError):
    pass


class DomainError(KercopError, ValueError):
    """An evaluation point lies outside the unit square (or unit interval)."""


class InfiniteQuantileError(KercopError, ValueError):
    """The Gaussian quantile of 0 or 1 was requested."""


class DegenerateDataError(KercopError, ValueError):
    pass


class InvalidBandwidthError(KercopError, ValueError):
    pass


class SegmentIndexError(KercopError, IndexError):
    pass


class DegenerateFieldError(KercopError, ArithmeticError):
    """A marginal integral of a spline field vanished during renormalization."""


class ModelFormatError(KercopError, ValueError):
    """A model file is corrupt or carries an unsupported format version."""
