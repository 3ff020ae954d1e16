"""Exception hierarchy shared across the package.

Every category maps to one failure mode surfaced at the CLI: configuration
problems, bad operation parameters, tensor shape mismatches, dataset I/O,
detection-target construction, benchmark orchestration and numeric blowups.
"""


class EquidetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EquidetError):
    """A config object violates its documented ranges or invariants."""


class ParameterError(EquidetError):
    """An operation was called with an out-of-range parameter."""


class ShapeError(EquidetError):
    """Array/tensor shapes are inconsistent with the operation contract."""


class DatasetError(EquidetError):
    """A dataset directory is missing, unreadable or not writable."""


class TargetError(EquidetError):
    """Detection-target construction received boxes outside the image."""


class BenchmarkError(EquidetError):
    """Benchmark orchestration failed (e.g. a checkpoint is missing)."""


class NumericError(EquidetError):
    """A loss or metric became non-finite."""
