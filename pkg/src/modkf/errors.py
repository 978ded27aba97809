"""Exception types raised by modkf."""


class ModkfError(Exception):
    """Base class for all modkf errors."""


class InputTooShortError(ModkfError, ValueError):
    """Signal or track is shorter than the minimum processing unit."""


class ShapeError(ModkfError, ValueError):
    """Array dimensions do not match the grid they are paired with."""


class AudioFormatError(ModkfError, ValueError):
    """WAV file is unreadable or has an unsupported layout."""


class GeometryError(ModkfError, ValueError):
    """Observation is incompatible with the speech/noise phasor geometry."""


class DegenerateError(ModkfError, ValueError):
    """A distribution or transform hit a degenerate point."""


class NumericError(ModkfError, ArithmeticError):
    """Numerical failure that cannot be repaired locally."""
