"""Exception taxonomy.

Three top-level families map onto CLI exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""

from __future__ import annotations


class MecoError(Exception):
    """Base class for all package errors."""


class ConfigError(MecoError):
    """Invalid or inconsistent configuration / usage."""


class DataError(MecoError):
    """Malformed, missing, or mismatched input data."""


class NumericError(MecoError):
    """Numerically invalid input or unstable computation."""


class FormatError(DataError):
    """Corrupt or truncated binary file; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumError(DataError):
    """Checkpoint trailer checksum mismatch."""


class MissingArtifactError(ConfigError):
    """A prerequisite checkpoint or file is missing; names the step to run."""


class InvalidRotationError(NumericError):
    """Matrix is not a proper rotation within tolerance."""


class DegenerateRotationError(NumericError):
    """6D rotation input too close to parallel/zero for Gram-Schmidt."""


class InvalidCodeError(DataError):
    """Code index out of range for the codebook."""


class ShapeError(DataError):
    """Array dimensions incompatible with the operation."""


class VocabError(DataError):
    """Token id outside the model's vocabulary."""


class ContractViolationError(ConfigError):
    """A stage was invoked with the wrong freeze/trainability state."""


class UndefinedMetricError(DataError):
    """Metric undefined for the given inputs (e.g. empty beat sets)."""
