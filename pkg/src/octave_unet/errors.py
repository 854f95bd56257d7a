"""Exception hierarchy shared across the package."""


class OctaveUNetError(Exception):
    """Base class for all package errors."""


class ShapeError(OctaveUNetError, ValueError):
    """Tensor extents are invalid or incompatible."""


class ConfigError(OctaveUNetError, ValueError):
    """A configuration value is invalid (bad alpha split, bad threshold, ...)."""


class DataError(OctaveUNetError, ValueError):
    """Input data violates a contract (non-binary truth, missing files, ...)."""


class DegenerateDataError(DataError):
    """Data is well-formed but statistically degenerate (e.g. a single class)."""


class ContractError(OctaveUNetError, RuntimeError):
    """An API precondition was violated by the caller."""


class OracleInvalidError(OctaveUNetError, RuntimeError):
    """A verification oracle cannot be trusted (e.g. non-deterministic f)."""


class NonFiniteError(OctaveUNetError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class CheckpointError(OctaveUNetError, ValueError):
    """A checkpoint file is malformed, truncated or inconsistent."""
