"""Exception hierarchy shared across the toolkit.

Every error that a command can surface maps onto one of the CLI exit
codes (see cli.EXIT_CODES): configuration problems, malformed data,
contract violations, and numeric failures are kept distinct so callers
can react programmatically.
"""


class VoldiffError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(VoldiffError):
    """An argument is out of range, non-finite, or otherwise invalid."""


class ConfigError(VoldiffError):
    """A run configuration is malformed (unknown keys, bad values)."""


class ShapeError(VoldiffError):
    """Array shapes are incompatible with the requested operation."""


class DataError(VoldiffError):
    """Input data violates a documented precondition."""


class InsufficientDataError(DataError):
    """Too few usable observations for a statistical procedure."""


class ContractViolationError(VoldiffError):
    """A caller broke an API contract (e.g. mutating frozen parameters)."""


class NumericError(VoldiffError):
    """A computation produced non-finite values or hit a singularity."""


class CheckpointError(DataError):
    """Base class for checkpoint container problems."""


class CheckpointBadMagic(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointTruncated(CheckpointError):
    """The file ends before the manifest or a tensor blob is complete."""


class CheckpointTensorMismatch(CheckpointError):
    """Tensor names or shapes in the file do not match the target module."""


class VolumeFormatError(DataError):
    """Base class for volume container problems."""


class VolumeBadMagic(VolumeFormatError):
    """The volume file does not start with the expected magic bytes."""


class VolumePayloadError(VolumeFormatError):
    """Header dims disagree with the payload length."""
