"""Exception types shared across the pipeline modules."""


class BriaError(Exception):
    """Base class for all pipeline errors."""


# --- slide I/O ---

class MissingMetadata(BriaError):
    """slide.json is absent or unreadable."""


class ChannelMissing(BriaError):
    """A FOV is missing one of its channel images."""

    def __init__(self, row: int, col: int, channel: str):
        self.row, self.col, self.channel = row, col, channel
        super().__init__(f"FOV r{row}c{col} is missing channel '{channel}'")


class DimensionMismatch(BriaError):
    """A plane on disk does not match the metadata dimensions."""


class CenterOutsideFov(BriaError):
    """Crop center lies outside the FOV bounds."""


# --- synthesis ---

class PlacementOverflow(BriaError):
    """Rejection sampling could not place all requested objects."""


# --- detection / segmentation ---

class BadParams(BriaError):
    """Detector parameters are invalid."""


class DegenerateInput(BriaError):
    """Input carries no usable signal (e.g. constant values)."""


class EmptyMask(BriaError):
    """Segmentation produced no pixels for this object."""


class ShapeMismatch(BriaError):
    """Arrays expected to share a shape do not."""


class NotNormalizable(BriaError):
    """Probability maps deviate too far from summing to one."""


class CoverageGap(BriaError):
    """Patch set leaves part of the FOV uncovered."""


class DegenerateMask(BriaError):
    """Mask too small to support shape descriptors."""


# --- features / classification ---

class UnknownFeatureName(BriaError):
    """A rule references a feature not present in the schema."""


class SchemaMismatch(BriaError):
    """Feature vector does not match the model's schema."""


class SingleClass(BriaError):
    """Training data contains only one class."""


class NonConvergence(BriaError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, gap: float | None = None):
        self.gap = gap
        super().__init__(message)


# --- pipeline / review ---

class IoFailure(BriaError):
    """Export or import failed at the filesystem level."""


class UnknownSlide(BriaError):
    """No export found for the requested slide id."""


class UnknownCandidate(BriaError):
    """No candidate found for the requested id."""


class BadDecision(BriaError):
    """Verdict decision is not one of the allowed values."""
