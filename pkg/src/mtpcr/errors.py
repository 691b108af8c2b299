"""Exception taxonomy shared by all pipeline stages.

Every error class carries a distinct process exit code so the CLI can map
failures injectively (documented in the README exit-code table).
"""

from __future__ import annotations


class MtpcrError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class IoError(MtpcrError):
    """File missing, unreadable, or truncated."""

    exit_code = 3


class ParseError(MtpcrError):
    """Malformed cloud/image/config content."""

    exit_code = 4


class EmptyCloud(MtpcrError):
    """Operation requires a non-empty point cloud."""

    exit_code = 5


class InvalidParameter(MtpcrError):
    """Configuration value outside its documented domain."""

    exit_code = 6


class DegenerateExtent(MtpcrError):
    """Cloud has zero x or y extent; no raster can be built."""

    exit_code = 7


class InsufficientPoints(MtpcrError):
    """Too few points for plane fitting."""

    exit_code = 8


class NoConsensus(MtpcrError):
    """RANSAC found no plane meeting the inlier fraction."""

    exit_code = 9


class ExternalMatcherFailure(MtpcrError):
    """External matcher process failed or produced malformed output."""

    exit_code = 10


class EmptyPixel(MtpcrError):
    """Keypoint lies on an unoccupied raster pixel."""

    exit_code = 11


class TooFewCorrespondences(MtpcrError):
    """Fewer than three 3D correspondences available."""

    exit_code = 12


class DegenerateConfiguration(MtpcrError):
    """Correspondence geometry does not constrain the rotation."""

    exit_code = 13


class ConvergenceFailed(MtpcrError):
    """Iterative rejection discarded too many correspondences."""

    exit_code = 14


class NoCorrespondencesInRange(MtpcrError):
    """ICP found no matched pair within the correspondence distance."""

    exit_code = 15


class UnsatisfiableOverlap(MtpcrError):
    """Scene geometry cannot realize the requested overlap ratio."""

    exit_code = 16


class StageError(MtpcrError):
    """Wraps a stage failure with the stage's name; keeps the cause's code."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", MtpcrError.exit_code)
