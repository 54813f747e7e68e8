"""Exception types shared across the package."""


class McnfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(McnfError, ValueError):
    """Array shapes or widths do not line up."""


class StateError(McnfError, RuntimeError):
    """An operation was called in the wrong lifecycle state."""


class ConfigError(McnfError, ValueError):
    """Invalid configuration value."""


class TrainingError(McnfError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class CalibrationError(McnfError, ValueError):
    """Not enough calibration points for the requested miscoverage."""


class IngestionError(McnfError, ValueError):
    """A dataset file could not be read or parsed."""
