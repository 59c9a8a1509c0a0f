"""Exception types shared across the package."""


class ResposeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ResposeError, ValueError):
    """A caller violated a documented precondition."""


class DegenerateGeometryError(ResposeError):
    """Geometry that cannot be processed (e.g. non-positive projection depth)."""


class AlignmentDegenerateError(ResposeError):
    """Procrustes alignment on degenerate input (coincident points, <3 joints)."""


class GenerationError(ResposeError):
    """Synthetic data generation failed (e.g. rejection sampling exhausted)."""


class CheckpointError(ResposeError):
    """Checkpoint file unreadable, truncated, or from an incompatible version."""


class ConfigError(ResposeError):
    """Configuration file invalid; message names the offending key path."""


class TrainingDiverged(ResposeError):
    """A loss component became non-finite; message names the component."""


class TrainingComplete(ResposeError):
    """Raised when a step index is requested past the configured budget."""
