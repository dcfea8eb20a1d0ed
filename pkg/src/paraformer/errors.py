"""Exception hierarchy shared by every paraformer module."""


class ParaFormerError(Exception):
    """Base class for all library errors."""


class ShapeError(ParaFormerError, ValueError):
    """Operand extents do not conform."""


class RankError(ParaFormerError, ValueError):
    """Operand has the wrong number of dimensions."""


class SizeError(ParaFormerError, ValueError):
    """A verification-only construction would exceed its size cap."""


class StageError(ParaFormerError, IndexError):
    """Stage or branch index outside ``[1, n_branches]``."""


class ConfigError(ParaFormerError, ValueError):
    """Invalid or unrecognised configuration."""


class DataFormatError(ParaFormerError, ValueError):
    """A dataset file does not follow its binary format."""


class DataError(ParaFormerError, ValueError):
    """Dataset content is inconsistent (counts, label ranges, emptiness)."""


class CheckpointError(ParaFormerError):
    """Base class for checkpoint load failures."""


class IntegrityError(CheckpointError):
    """Checkpoint checksum mismatch."""


class VersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class SchemaError(CheckpointError):
    """Checkpoint is structurally malformed or lacks a required tensor."""


class PoolError(ParaFormerError, RuntimeError):
    """Worker pool is unusable (shut down, or a worker failed)."""
