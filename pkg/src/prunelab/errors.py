"""Exception types shared across the package.

The CLI maps these onto exit codes, so the split matters: configuration
problems (bad key, bad value, unreadable config file) are distinct from
runtime failures (shape mismatches, bad data files, diverged training).
"""


class ShapeError(ValueError):
    """Operands or parameters have incompatible shapes."""


class InputError(ValueError):
    """A caller-supplied argument is invalid (out of range, missing, wrong kind)."""


class StateError(RuntimeError):
    """An operation was called in the wrong order or on stale state."""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class ConfigError(ValueError):
    """A configuration file or key is invalid."""


class CapabilityError(RuntimeError):
    """The requested rewiring or operation is not supported on this graph."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise failed."""
