"""Exception types shared across the package.

Every module raises from this small hierarchy so callers (and the CLI exit-code
mapping) can distinguish configuration problems, data problems, and I/O
problems without string matching.
"""


class RedcoreError(Exception):
    """Base class for all package errors."""


class InvalidTensor(RedcoreError):
    """A tensor contains NaN/Inf or cannot be coerced to a dense float array."""


class ShapeError(RedcoreError):
    """Operands have incompatible shapes; the message carries both shapes."""


class LabelError(RedcoreError):
    """A class label lies outside [0, num_classes)."""


class ConfigError(RedcoreError):
    """A configuration value violates its documented domain."""


class DomainError(RedcoreError):
    """A numeric argument violates a mathematical precondition."""


class DegenerateModality(RedcoreError):
    """A modality is absent from every sample, which the pipeline forbids."""


class ParseError(RedcoreError):
    """An on-disk dataset file is malformed; names the file and line."""


class CheckpointError(RedcoreError):
    """A checkpoint is truncated or inconsistent with its manifest."""
