"""Exception hierarchy shared by the pipeline.

Each class maps to one CLI exit code (see ``tilevote.cli``): configuration
problems exit 2, data problems 3, numeric divergence 4, and missing
prerequisite artifacts 5.
"""


class TileVoteError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(TileVoteError):
    """Invalid or inconsistent configuration."""


class DataError(TileVoteError):
    """Malformed, missing, or inconsistent data."""


class GridError(DataError):
    """Grid does not fit the image, or is otherwise invalid."""


class QuotaError(DataError):
    """Split quota cannot be satisfied by the available images."""


class FoldError(DataError):
    """Cross-validation fold request cannot be satisfied."""


class ShapeError(DataError):
    """Array input has the wrong shape for the operation."""


class CheckpointError(DataError):
    """Checkpoint file is corrupt, incompatible, or mismatched."""


class StateError(TileVoteError):
    """Operation requires state (e.g. retained activations) that is absent."""


class DivergenceError(TileVoteError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class MissingArtifactError(TileVoteError):
    """A prerequisite file produced by an earlier stage is missing."""

    def __init__(self, path, hint=""):
        msg = f"missing prerequisite artifact: {path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
        self.path = str(path)
