"""Exception hierarchy shared across voxjepa modules."""


class VoxJepaError(Exception):
    """Base class for all errors raised deliberately by voxjepa."""


class ConfigError(VoxJepaError, ValueError):
    """Invalid configuration: unknown fields, bad values, unresolvable paths."""


class DataError(VoxJepaError):
    """Input data is missing, malformed, or cannot support the requested operation."""


class PlacementError(DataError, ValueError):
    """A lesion could not be placed inside brain tissue on the requested side."""


class CorruptionError(DataError):
    """Stored bytes do not match their recorded length or checksum."""


class ManifestError(DataError):
    """A shard manifest is internally inconsistent."""


class EmptyVolumeError(DataError, ValueError):
    """A volume has no foreground tokens."""


class NoStudiesError(DataError):
    """A split or selection contains no studies."""


class ShapeError(VoxJepaError, ValueError):
    """Operands of a tensor operation have incompatible shapes."""


class UndefinedMetricError(VoxJepaError, ValueError):
    """A metric is undefined for the given input (e.g. a single class)."""


class BootstrapError(VoxJepaError):
    """Too many degenerate bootstrap replicates for a reliable interval."""


class FitError(VoxJepaError, ValueError):
    """A statistical fit was refused (too few eligible points)."""


class NumericalError(VoxJepaError, ArithmeticError):
    """Non-finite values appeared during training or optimization."""
