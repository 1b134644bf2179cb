"""Whole-cell instance segmentation from class probability maps.

Probability maps (cell / boundary / background) come from either a
classical generator or external files. Overlapping patch maps merge by
the max rule (background inverted), and instances are carved out by a
deterministic marker-based watershed seeded at detection centroids.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CoverageGap, DegenerateInput, NotNormalizable, ShapeMismatch
from .nucseg import otsu_threshold
from .slide_io import FieldOfView, read_plane, write_plane

PROBMAP_SCALE = 65535
SUM_TOLERANCE = 1e-6
RENORM_TOLERANCE = 0.05

_DISK2 = np.array([
    [0, 0, 1, 0, 0],
    [0, 1, 1, 1, 0],
    [1, 1, 1, 1, 1],
    [0, 1, 1, 1, 0],
    [0, 0, 1, 0, 0],
], dtype=bool)


@dataclass
class ProbMaps:
    """Per-pixel class probabilities; the three planes sum to one."""

    cell: np.ndarray
    boundary: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        if not (self.cell.shape == self.boundary.shape == self.background.shape):
            raise ShapeMismatch("probability planes differ in shape")

    @property
    def shape(self):
        return self.cell.shape

    def check(self, tol: float = SUM_TOLERANCE) -> None:
        for name, plane in (("cell", self.cell), ("boundary", self.boundary),
                            ("background", self.background)):
            if plane.min() < -tol or plane.max() > 1 + tol:
                raise NotNormalizable(f"{name} map out of [0, 1]")
        total = self.cell + self.boundary + self.background
        if np.abs(total - 1.0).max() > tol:
            raise NotNormalizable("maps do not sum to 1")

    def renormalized(self) -> "ProbMaps":
        total = self.cell + self.boundary + self.background
        safe = np.where(total > 0, total, 1.0)
        return ProbMaps(self.cell / safe, self.boundary / safe,
                        self.background / safe)


@dataclass
class CellMask:
    """One cell instance: a bounding-boxed mask keyed to its seed."""

    label: int
    detection_index: int
    x0: int
    y0: int
    mask: np.ndarray  # bool, within the bounding box

    @property
    def area_px(self) -> int:
        return int(self.mask.sum())

    def full_mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        h, w = self.mask.shape
        out[self.y0:self.y0 + h, self.x0:self.x0 + w] = self.mask
        return out


def _soft(region: np.ndarray, scale: float = 2.0) -> np.ndarray:
    """Logistic of the signed distance to a region (positive inside)."""
    if region.all():
        d = ndimage.distance_transform_edt(region)
    elif not region.any():
        d = -ndimage.distance_transform_edt(~region)
    else:
        d = (ndimage.distance_transform_edt(region)
             - ndimage.distance_transform_edt(~region))
    return 1.0 / (1.0 + np.exp(-d / scale))


def classical_probmaps(fov: FieldOfView, smooth_sigma: float = 2.0) -> ProbMaps:
    """Classical stand-in for a learned cell/boundary/background model.

    Foreground is Otsu-thresholded from the smoothed per-pixel max of
    min-max-normalized channels; the boundary class is the foreground's
    outward morphological gradient (disk radius 2, kept outside the cell
    body so cell probability stays dominant on cell pixels); all three
    regions are softened by a logistic of signed distance (scale 2 px)
    and renormalized per pixel.

    Raises
    ------
    DegenerateInput
        If the combined signal plane is constant (e.g. a blank FOV).
    """
    normed = []
    for ch, plane in fov.planes.items():
        p = plane.astype(np.float64)
        lo, hi = p.min(), p.max()
        normed.append((p - lo) / (hi - lo) if hi > lo else np.zeros_like(p))
    signal = ndimage.gaussian_filter(np.max(normed, axis=0), sigma=smooth_sigma)
    if signal.max() == signal.min():
        raise DegenerateInput("combined signal plane is constant")

    fg = signal > otsu_threshold(signal)
    ring = ndimage.binary_dilation(fg, structure=_DISK2) & ~fg
    bg = ~(fg | ring)

    cell_s = _soft(fg)
    bound_s = _soft(ring)
    bg_s = _soft(bg)
    total = cell_s + bound_s + bg_s
    return ProbMaps(cell_s / total, bound_s / total, bg_s / total)


def save_probmaps(maps: ProbMaps, directory, stem: str = "probmaps") -> Path:
    """Write a 16-bit PNG triplet scaled by 65535 plus a JSON sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, plane in (("cell", maps.cell), ("boundary", maps.boundary),
                        ("background", maps.background)):
        fname = f"{stem}_{name}.png"
        write_plane(directory / fname,
                    np.rint(np.clip(plane, 0, 1) * PROBMAP_SCALE).astype(np.uint16))
        files[name] = fname
    sidecar = directory / f"{stem}.json"
    with open(sidecar, "w") as fh:
        json.dump({"kind": "probmaps", "scale": PROBMAP_SCALE, "files": files},
                  fh, indent=2, sort_keys=True)
    return sidecar


def load_probmaps(sidecar_path) -> ProbMaps:
    """Load and validate an externally produced probability-map triplet.

    Per-pixel sums within 0.05 of 1 are renormalized; anything further
    off is rejected.

    Raises
    ------
    ShapeMismatch, NotNormalizable
    """
    sidecar_path = Path(sidecar_path)
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    scale = float(sidecar.get("scale", PROBMAP_SCALE))
    planes = {}
    for name in ("cell", "boundary", "background"):
        planes[name] = read_plane(sidecar_path.parent / sidecar["files"][name]) / scale
    shapes = {p.shape for p in planes.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"triplet shapes differ: {sorted(shapes)}")
    if any(p.min() < 0 or p.max() > 1 for p in planes.values()):
        raise NotNormalizable("values outside [0, 1]")
    maps = ProbMaps(planes["cell"], planes["boundary"], planes["background"])
    total = maps.cell + maps.boundary + maps.background
    if np.abs(total - 1.0).max() > RENORM_TOLERANCE:
        raise NotNormalizable(
            f"per-pixel sums deviate up to {np.abs(total - 1.0).max():.3f} from 1")
    return maps.renormalized()


def patch_plan(fov_shape, patch: int = 512, overlap: int = 64,
               detections: list | None = None) -> list:
    """Regular grid of overlapping windows, dropping cell-free ones.

    Returns (x0, y0, width, height) windows; windows that contain no
    detection centroid are discarded so empty regions are never mapped.
    """
    if not patch > overlap >= 0:
        raise ValueError("need patch > overlap >= 0")
    h, w = fov_shape
    stride = patch - overlap

    def starts(extent):
        if extent <= patch:
            return [0]
        n = int(np.ceil((extent - patch) / stride)) + 1
        return [min(i * stride, extent - patch) for i in range(n)]

    windows = [(x0, y0, min(patch, w), min(patch, h))
               for y0 in starts(h) for x0 in starts(w)]
    if detections is None:
        return windows
    pts = [d.centroid_xy for d in detections]
    kept = []
    for (x0, y0, pw, ph) in windows:
        if any(x0 <= x < x0 + pw and y0 <= y < y0 + ph for x, y in pts):
            kept.append((x0, y0, pw, ph))
    return kept


def merge_patches(patches: list, fov_shape, fill_uncovered: bool = False) -> ProbMaps:
    """Merge overlapping patch maps into one FOV map.

    Per pixel: cell and boundary take the max over covering patches;
    background keeps ``1 - max(1 - background)``; the result is
    renormalized to sum to one. With ``fill_uncovered`` (used after
    cell-free patches were dropped from the plan) uncovered pixels
    become pure background instead of an error.

    Raises
    ------
    CoverageGap
        If any FOV pixel is covered by no patch and filling is off.
    """
    h, w = fov_shape
    cell = np.full((h, w), -np.inf)
    boundary = np.full((h, w), -np.inf)
    inv_bg = np.full((h, w), -np.inf)
    covered = np.zeros((h, w), dtype=bool)
    for maps, (x0, y0) in patches:
        ph, pw = maps.shape
        sl = (slice(y0, y0 + ph), slice(x0, x0 + pw))
        cell[sl] = np.maximum(cell[sl], maps.cell)
        boundary[sl] = np.maximum(boundary[sl], maps.boundary)
        inv_bg[sl] = np.maximum(inv_bg[sl], 1.0 - maps.background)
        covered[sl] = True
    if not covered.all():
        if not fill_uncovered:
            n = int((~covered).sum())
            raise CoverageGap(f"{n} pixels uncovered by the patch plan")
        cell[~covered] = 0.0
        boundary[~covered] = 0.0
        inv_bg[~covered] = 0.0
    merged = ProbMaps(cell, boundary, 1.0 - inv_bg)
    return merged.renormalized()


def instance_segment(maps: ProbMaps, seeds: list) -> tuple:
    """Marker-based watershed over ``boundary - cell`` topography.

    Flooding is restricted to the foreground ``cell + boundary >
    background``; seeds outside the foreground adopt their nearest
    foreground pixel. Priority floods ascending with FIFO tie-breaking,
    ties across labels resolved by lower seed id, so the label plane is
    fully deterministic.

    Returns ``(label_plane, cell_masks)``; an empty foreground yields
    an all-zero plane and no masks.
    """
    h, w = maps.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if not seeds:
        return labels, []
    fg = (maps.cell + maps.boundary) > maps.background
    if not fg.any():
        return labels, []
    topo = maps.boundary - maps.cell

    # Map each seed to a marker pixel inside the foreground.
    _, (near_y, near_x) = ndimage.distance_transform_edt(~fg, return_indices=True)
    markers = []
    for sid, det in enumerate(seeds, start=1):
        cx, cy = det.centroid_xy if hasattr(det, "centroid_xy") else det
        x = int(np.clip(round(cx), 0, w - 1))
        y = int(np.clip(round(cy), 0, h - 1))
        if not fg[y, x]:
            y, x = int(near_y[y, x]), int(near_x[y, x])
        markers.append((sid, y, x))

    flat_topo = topo.ravel()
    flat_fg = fg.ravel()
    flat_labels = labels.ravel()
    heap = []
    counter = 0
    for sid, y, x in markers:
        idx = y * w + x
        heapq.heappush(heap, (flat_topo[idx], counter, idx, sid))
        counter += 1

    while heap:
        _, _, idx, sid = heapq.heappop(heap)
        if flat_labels[idx]:
            continue
        flat_labels[idx] = sid
        y, x = divmod(idx, w)
        for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
            if 0 <= ny < h and 0 <= nx < w:
                nidx = ny * w + nx
                if flat_fg[nidx] and not flat_labels[nidx]:
                    heapq.heappush(heap, (flat_topo[nidx], counter, nidx, sid))
                    counter += 1

    # The boundary class is a separator, not cell body: basins keep their
    # territory in the label plane, but each exported mask drops pixels
    # where boundary probability dominates both other classes.
    boundary_dom = (maps.boundary > maps.cell) & (maps.boundary > maps.background)
    masks = []
    objects = ndimage.find_objects(labels)
    for sid, _, _ in markers:
        sl = objects[sid - 1] if sid - 1 < len(objects) else None
        if sl is None:
            continue
        basin = labels[sl] == sid
        region = basin & ~boundary_dom[sl]
        if not region.any():
            region = basin
        masks.append(CellMask(label=sid, detection_index=sid - 1,
                              x0=sl[1].start, y0=sl[0].start, mask=region))
    return labels, masks
