"""Slide/FOV data model and on-disk layout.

A slide is a grid of 3-channel fields of view stored as one 16-bit
grayscale PNG per channel per FOV (``r{row}_c{col}_{channel}.png``) next
to a ``slide.json`` sidecar holding the grid shape, pixel size and
channel order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    CenterOutsideFov,
    ChannelMissing,
    DimensionMismatch,
    MissingMetadata,
)

CHANNELS = ("dapi", "ck", "cd45")

DEFAULT_PIXEL_SIZE_UM = 0.5
ANALYSIS_THUMB_PX = 24
DISPLAY_THUMB_PX = 96

METADATA_NAME = "slide.json"


def plane_filename(row: int, col: int, channel: str) -> str:
    return f"r{row}_c{col}_{channel}.png"


def write_plane(path: Path, plane: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(plane, dtype=np.uint16)).save(path)


def read_plane(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return arr.astype(np.uint16)


@dataclass(frozen=True)
class SlideMeta:
    """Immutable slide-level metadata."""

    slide_id: str
    grid_rows: int
    grid_cols: int
    fov_width_px: int
    fov_height_px: int
    pixel_size_um: float = DEFAULT_PIXEL_SIZE_UM
    channels: tuple = CHANNELS
    missing_fovs: tuple = ()

    def __post_init__(self):
        for name in ("grid_rows", "grid_cols", "fov_width_px", "fov_height_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pixel_size_um <= 0:
            raise ValueError("pixel_size_um must be positive")
        if tuple(self.channels) != CHANNELS:
            raise ValueError(f"channels must be exactly {CHANNELS}")
        object.__setattr__(self, "missing_fovs", tuple(tuple(rc) for rc in self.missing_fovs))

    def grid_keys(self):
        """All (row, col) positions expected to hold a FOV."""
        missing = set(self.missing_fovs)
        for r in range(self.grid_rows):
            for c in range(self.grid_cols):
                if (r, c) not in missing:
                    yield (r, c)

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "grid_rows": self.grid_rows,
            "grid_cols": self.grid_cols,
            "fov_width_px": self.fov_width_px,
            "fov_height_px": self.fov_height_px,
            "pixel_size_um": self.pixel_size_um,
            "channels": list(self.channels),
            "missing_fovs": [list(rc) for rc in self.missing_fovs],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SlideMeta":
        try:
            return cls(
                slide_id=d["slide_id"],
                grid_rows=int(d["grid_rows"]),
                grid_cols=int(d["grid_cols"]),
                fov_width_px=int(d["fov_width_px"]),
                fov_height_px=int(d["fov_height_px"]),
                pixel_size_um=float(d.get("pixel_size_um", DEFAULT_PIXEL_SIZE_UM)),
                channels=tuple(d.get("channels", CHANNELS)),
                missing_fovs=tuple(tuple(rc) for rc in d.get("missing_fovs", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MissingMetadata(f"invalid slide metadata: {exc}") from exc


@dataclass
class FieldOfView:
    """One grid tile: a 2D uint16 plane per channel."""

    row: int
    col: int
    planes: dict  # channel name -> (H, W) uint16 array

    def __post_init__(self):
        shapes = {ch: p.shape for ch, p in self.planes.items()}
        if len(set(shapes.values())) > 1:
            raise DimensionMismatch(f"FOV r{self.row}c{self.col} planes differ in shape: {shapes}")

    @property
    def shape(self):
        return next(iter(self.planes.values())).shape


@dataclass
class Thumbnail:
    """Per-channel square crop around a point, with its FOV offset.

    ``x0``/``y0`` locate thumbnail pixel (0, 0) in FOV coordinates;
    out-of-bounds source pixels are zero padding.
    """

    planes: dict
    x0: int
    y0: int
    size: int
    row: int
    col: int
    center_xy: tuple

    def stack(self) -> np.ndarray:
        """(size, size, 3) array in canonical channel order."""
        return np.stack([self.planes[ch] for ch in CHANNELS], axis=-1)


@dataclass
class QCReport:
    slide_id: str
    fovs_expected: int
    fovs_found: int
    channel_stats: dict
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "fovs_expected": self.fovs_expected,
            "fovs_found": self.fovs_found,
            "channel_stats": self.channel_stats,
            "failures": list(self.failures),
        }


class Slide:
    """A loaded or in-memory slide.

    Disk-backed slides load FOVs lazily; in-memory slides (from the
    synthetic generator) keep planes in ``_memory``. Metadata is
    immutable after construction, so FOVs can be read concurrently.
    """

    def __init__(self, meta: SlideMeta, root: Path | None = None, memory: dict | None = None):
        self.meta = meta
        self.root = Path(root) if root is not None else None
        self._memory = memory  # {(row, col): {channel: plane}}

    @property
    def slide_id(self) -> str:
        return self.meta.slide_id

    def fov(self, row: int, col: int) -> FieldOfView:
        if self._memory is not None:
            planes = {ch: self._memory[(row, col)][ch] for ch in self.meta.channels}
            return FieldOfView(row=row, col=col, planes=planes)
        planes = {}
        expected = (self.meta.fov_height_px, self.meta.fov_width_px)
        for ch in self.meta.channels:
            path = self.root / plane_filename(row, col, ch)
            if not path.exists():
                raise ChannelMissing(row, col, ch)
            plane = read_plane(path)
            if plane.shape != expected:
                raise DimensionMismatch(
                    f"{path.name}: got {plane.shape}, metadata says {expected}"
                )
            planes[ch] = plane
        return FieldOfView(row=row, col=col, planes=planes)

    def fovs(self):
        for r, c in self.meta.grid_keys():
            yield self.fov(r, c)

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / METADATA_NAME, "w") as fh:
            json.dump(self.meta.to_json(), fh, indent=2, sort_keys=True)
        for r, c in self.meta.grid_keys():
            fov = self.fov(r, c)
            for ch in self.meta.channels:
                write_plane(root / plane_filename(r, c, ch), fov.planes[ch])


def load_slide(root) -> Slide:
    """Load a slide directory, validating metadata against files on disk.

    Every expected plane must exist and its PNG header must match the
    metadata dimensions (headers are read without decoding pixels, so
    this stays cheap for large slides).
    """
    root = Path(root)
    meta_path = root / METADATA_NAME
    if not meta_path.exists():
        raise MissingMetadata(f"no {METADATA_NAME} in {root}")
    try:
        with open(meta_path) as fh:
            meta = SlideMeta.from_json(json.load(fh))
    except json.JSONDecodeError as exc:
        raise MissingMetadata(f"unparseable {METADATA_NAME}: {exc}") from exc

    expected = (meta.fov_width_px, meta.fov_height_px)  # PIL size is (W, H)
    for r, c in meta.grid_keys():
        for ch in meta.channels:
            path = root / plane_filename(r, c, ch)
            if not path.exists():
                raise ChannelMissing(r, c, ch)
            with Image.open(path) as im:
                if im.size != expected:
                    raise DimensionMismatch(
                        f"{path.name}: size {im.size[::-1]}, metadata says {expected[::-1]}"
                    )
    return Slide(meta, root=root)


def validate_slide(slide: Slide) -> QCReport:
    """Full-read QC: missing planes, dimension errors and all-zero planes.

    Failures are data, not exceptions; an empty failure list means the
    slide passes QC.
    """
    failures = []
    found = 0
    stats = {ch: {"min": None, "max": None, "sum": 0.0, "count": 0} for ch in slide.meta.channels}
    for r, c in slide.meta.grid_keys():
        try:
            fov = slide.fov(r, c)
        except ChannelMissing as exc:
            failures.append(f"missing plane: r{exc.row}c{exc.col} channel {exc.channel}")
            continue
        except DimensionMismatch as exc:
            failures.append(f"dimension mismatch: {exc}")
            continue
        found += 1
        for ch in slide.meta.channels:
            plane = fov.planes[ch]
            if not plane.any():
                failures.append(f"all-zero plane: r{r}c{c} channel {ch}")
            s = stats[ch]
            lo, hi = int(plane.min()), int(plane.max())
            s["min"] = lo if s["min"] is None else min(s["min"], lo)
            s["max"] = hi if s["max"] is None else max(s["max"], hi)
            s["sum"] += float(plane.sum())
            s["count"] += plane.size

    channel_stats = {}
    for ch, s in stats.items():
        channel_stats[ch] = {
            "min": s["min"],
            "max": s["max"],
            "mean": (s["sum"] / s["count"]) if s["count"] else None,
        }
    expected_n = slide.meta.grid_rows * slide.meta.grid_cols - len(slide.meta.missing_fovs)
    return QCReport(
        slide_id=slide.slide_id,
        fovs_expected=expected_n,
        fovs_found=found,
        channel_stats=channel_stats,
        failures=failures,
    )


def crop(fov: FieldOfView, center, size: int) -> Thumbnail:
    """size x size crop per channel centered at ``center`` (x, y).

    Out-of-bounds pixels are zero-padded so detections near FOV edges
    still produce thumbnails. For even sizes the center lands at index
    ``size // 2``.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    h, w = fov.shape
    cx, cy = int(round(center[0])), int(round(center[1]))
    if not (0 <= cx < w and 0 <= cy < h):
        raise CenterOutsideFov(f"center ({cx}, {cy}) outside {w}x{h} FOV")

    x0 = cx - size // 2
    y0 = cy - size // 2
    sx0, sx1 = max(x0, 0), min(x0 + size, w)
    sy0, sy1 = max(y0, 0), min(y0 + size, h)

    planes = {}
    for ch, plane in fov.planes.items():
        out = np.zeros((size, size), dtype=plane.dtype)
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = plane[sy0:sy1, sx0:sx1]
        planes[ch] = out
    return Thumbnail(
        planes=planes, x0=x0, y0=y0, size=size, row=fov.row, col=fov.col,
        center_xy=(center[0], center[1]),
    )
