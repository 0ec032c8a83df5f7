"""Exception types shared across the package, mapped to CLI exit codes."""


class MoskitError(Exception):
    """Base class for all package errors."""


class ConfigError(MoskitError):
    """Invalid configuration: bad shapes, unknown keys, invalid enum values (exit 2)."""


class SelectionError(ConfigError):
    """Ensemble selection produced no usable member set (exit 2)."""


class DataFormatError(MoskitError):
    """Malformed input file: manifest, embedding, checkpoint, predictions (exit 3)."""


class DomainError(MoskitError):
    """Mathematically degenerate input (constant vectors, too few samples) (exit 4)."""


class TrainingError(MoskitError):
    """Numeric failure during optimization, e.g. divergence (exit 4)."""
