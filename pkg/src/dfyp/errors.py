"""Exception hierarchy shared by every dfyp module."""


class DFYPError(Exception):
    pass


class DimensionError(DFYPError, ValueError):
    """Shapes of the operands are incompatible."""


class ParameterError(DFYPError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigError(DFYPError, ValueError):
    """A configuration is internally inconsistent or names an unknown key."""


class ContractError(DFYPError, RuntimeError):
    """A call violated a documented precondition (e.g. backward on a non-scalar)."""


class NumericError(DFYPError, FloatingPointError):
    """A computation produced NaN or infinity."""


class LoadError(DFYPError, OSError):
    """A dataset or checkpoint on disk is missing, corrupt or inconsistent."""


class UnusableTileError(DFYPError, ValueError):
    """A tile has no valid pixels left after masking."""
