"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PoseNormError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class TooFewPoints(PoseNormError):
    pass


class InsufficientPoints(PoseNormError):
    """Too few anchor keypoints are co-visible to fit a region warp.

    Callers zero-fill the region's feature block when they see this.
    """


class DegenerateConfiguration(PoseNormError):
    pass


class SingularWarp(PoseNormError):
    pass


class TooFewVisible(PoseNormError):
    pass


class Infeasible(PoseNormError):
    """Some city cannot be connected to any facility at finite cost."""

    exit_code = 3

    def __init__(self, message: str, uncovered=()):
        super().__init__(message)
        self.uncovered = list(uncovered)


class UnknownPart(PoseNormError):
    pass


class FormatError(PoseNormError):
    pass


class ParseError(FormatError):
    pass


class MissingFile(PoseNormError):
    pass


class InconsistentIds(PoseNormError):
    pass


class DimensionMismatch(FormatError):
    pass


class LayoutMismatch(PoseNormError):
    pass


class DegenerateLabels(PoseNormError):
    pass
