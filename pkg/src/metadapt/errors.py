"""Exception hierarchy shared across the package."""


class MetAdaptError(Exception):
    pass


class DimensionError(MetAdaptError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(MetAdaptError, ArithmeticError):
    """A forward value or gradient became NaN or infinite."""


class PreconditionError(MetAdaptError, ValueError):
    pass


class GraphError(MetAdaptError, RuntimeError):
    """Backward was requested on something that is not attached to a graph."""


class DatasetIOError(MetAdaptError, IOError):
    pass


class DatasetFormatError(DatasetIOError):
    pass


class DatasetVersionError(DatasetIOError):
    pass


class DatasetTruncatedError(DatasetIOError):
    pass


class CheckpointError(MetAdaptError, IOError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass
