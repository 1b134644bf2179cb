"""Synthetic slide generator with exact ground truth.

Cells are rendered as radially smooth blobs (flat core, cosine falloff
over 2 px) with low-amplitude seeded texture; the background is a
constant baseline with Poisson shot noise and Gaussian read noise.
Everything is a pure function of (spec, seed), so identical seeds give
bit-identical slides and FOVs can be generated in parallel from per-FOV
derived seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import PlacementOverflow
from .slide_io import CHANNELS, FieldOfView, Slide, SlideMeta, read_plane, write_plane

FALLOFF_PX = 2.0  # smooth edge width of rendered blobs
MAX_PLACEMENT_ATTEMPTS = 1000

CellClass = str  # "ctc" | "wbc" | "artefact"

# Peak intensity ranges above background, chosen so the default biomarker
# rule (nuclear CK MFI > 269, nuclear CD45 MFI <= 3000) separates classes.
DEFAULT_INTENSITY = {
    "ctc": {"dapi": (2500.0, 3500.0), "ck": (2400.0, 3600.0), "cd45": (60.0, 180.0)},
    "wbc": {"dapi": (2500.0, 3500.0), "ck": (30.0, 110.0), "cd45": (4000.0, 7000.0)},
    "artefact": {"dapi": (280.0, 550.0), "ck": (5000.0, 9000.0), "cd45": (10.0, 60.0)},
}

# (nucleus_lo, nucleus_hi, cell_lo, cell_hi) radii in px at 0.5 um/px.
DEFAULT_RADII = {
    "ctc": (5.5, 7.5, 8.5, 11.0),
    "wbc": (4.5, 6.0, 6.5, 9.0),
    "artefact": (3.5, 5.0, 4.0, 6.0),
}


@dataclass
class NoiseSpec:
    baseline: float = 100.0
    read_sigma: float = 3.0
    shot: bool = True


@dataclass
class CellSpec:
    """Placement and rendering parameters for one planted object."""

    center_xy: tuple
    nucleus_radius_px: float
    cell_radius_px: float
    cell_class: CellClass
    peaks: dict  # channel -> peak intensity above background
    texture_seed: int
    eccentricity: float = 0.0
    angle: float = 0.0

    def __post_init__(self):
        if self.nucleus_radius_px > self.cell_radius_px:
            raise ValueError("nucleus radius must not exceed cell radius")
        if self.cell_class == "ctc" and self.peaks["ck"] <= self.peaks["cd45"]:
            raise ValueError("CTC spec must have CK peak above CD45 peak")
        if self.cell_class == "wbc" and self.peaks["cd45"] <= self.peaks["ck"]:
            raise ValueError("WBC spec must have CD45 peak above CK peak")

    def to_json(self) -> dict:
        return {
            "center_xy": list(self.center_xy),
            "nucleus_radius_px": self.nucleus_radius_px,
            "cell_radius_px": self.cell_radius_px,
            "class": self.cell_class,
            "peaks": dict(self.peaks),
            "texture_seed": self.texture_seed,
            "eccentricity": self.eccentricity,
            "angle": self.angle,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CellSpec":
        return cls(
            center_xy=tuple(d["center_xy"]),
            nucleus_radius_px=d["nucleus_radius_px"],
            cell_radius_px=d["cell_radius_px"],
            cell_class=d["class"],
            peaks=dict(d["peaks"]),
            texture_seed=int(d["texture_seed"]),
            eccentricity=d.get("eccentricity", 0.0),
            angle=d.get("angle", 0.0),
        )


@dataclass
class FovGroundTruth:
    """Exact per-FOV truth: cell specs plus rendered label planes.

    Label value i+1 in the planes marks cell i in ``cells``; artefact
    injections live in their own label plane so they never stomp cells.
    """

    row: int
    col: int
    cells: list = field(default_factory=list)
    nucleus_labels: np.ndarray | None = None
    cell_labels: np.ndarray | None = None
    artefact_labels: np.ndarray | None = None

    @property
    def classes(self) -> list:
        return [c.cell_class for c in self.cells]

    def centers(self, cell_class: CellClass | None = None) -> np.ndarray:
        pts = [c.center_xy for c in self.cells
               if cell_class is None or c.cell_class == cell_class]
        return np.asarray(pts, dtype=float).reshape(-1, 2)

    def nucleus_mask(self, index: int) -> np.ndarray:
        return self.nucleus_labels == index + 1

    def cell_mask(self, index: int) -> np.ndarray:
        return self.cell_labels == index + 1


@dataclass
class GroundTruth:
    """Ground truth for a whole generated slide."""

    slide_id: str
    per_fov: dict = field(default_factory=dict)  # (row, col) -> FovGroundTruth

    def all_cells(self):
        for key in sorted(self.per_fov):
            fgt = self.per_fov[key]
            for i, cell in enumerate(fgt.cells):
                yield key, i, cell

    def total(self, cell_class: CellClass | None = None) -> int:
        return sum(
            1 for _, _, c in self.all_cells()
            if cell_class is None or c.cell_class == cell_class
        )

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        doc = {"slide_id": self.slide_id, "fovs": []}
        for (r, c), fgt in sorted(self.per_fov.items()):
            doc["fovs"].append({
                "row": r, "col": c,
                "cells": [cell.to_json() for cell in fgt.cells],
            })
            for name, plane in (
                ("nucleus_labels", fgt.nucleus_labels),
                ("cell_labels", fgt.cell_labels),
                ("artefact_labels", fgt.artefact_labels),
            ):
                if plane is not None:
                    write_plane(root / f"{name}_r{r}_c{c}.png", plane.astype(np.uint16))
        with open(root / "ground_truth.json", "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, root) -> "GroundTruth":
        root = Path(root)
        with open(root / "ground_truth.json") as fh:
            doc = json.load(fh)
        gt = cls(slide_id=doc["slide_id"])
        for entry in doc["fovs"]:
            r, c = entry["row"], entry["col"]
            fgt = FovGroundTruth(row=r, col=c,
                                 cells=[CellSpec.from_json(d) for d in entry["cells"]])
            for name in ("nucleus_labels", "cell_labels", "artefact_labels"):
                path = root / f"{name}_r{r}_c{c}.png"
                if path.exists():
                    setattr(fgt, name, read_plane(path))
            gt.per_fov[(r, c)] = fgt
        return gt


@dataclass
class SlideSpec:
    """Parameters for one generated slide."""

    slide_id: str = "synthetic"
    grid_rows: int = 1
    grid_cols: int = 1
    fov_width_px: int = 512
    fov_height_px: int = 512
    pixel_size_um: float = 0.5
    counts: dict = field(default_factory=lambda: {"ctc": 5, "wbc": 45, "artefact": 0})
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    intensity: dict = field(default_factory=lambda: {k: {c: v for c, v in d.items()}
                                                     for k, d in DEFAULT_INTENSITY.items()})
    radii: dict = field(default_factory=lambda: dict(DEFAULT_RADII))
    min_sep_factor: float = 1.5
    texture_amp: float = 0.05
    eccentricity: float = 0.0
    seed: int = 0

    def mean_cell_radius(self) -> float:
        tot, n = 0.0, 0
        for cls, count in self.counts.items():
            lo, hi = self.radii[cls][2], self.radii[cls][3]
            tot += count * (lo + hi) / 2.0
            n += count
        return tot / n if n else 0.0


def _blob_profile(dist: np.ndarray, radius: float) -> np.ndarray:
    """Radially smooth profile: 1 inside ``radius``, cosine falloff over 2 px."""
    prof = np.zeros_like(dist)
    prof[dist <= radius] = 1.0
    ramp = (dist > radius) & (dist <= radius + FALLOFF_PX)
    prof[ramp] = 0.5 * (1.0 + np.cos(np.pi * (dist[ramp] - radius) / FALLOFF_PX))
    return prof


def _elliptical_distance(h: int, w: int, cx: float, cy: float,
                         ecc: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return np.hypot(u / (1.0 + ecc), v / (1.0 - ecc) if ecc < 1.0 else v)


def _render_cell(spec: CellSpec, shape: tuple, accum: dict,
                 nucleus_labels: np.ndarray, cell_labels: np.ndarray,
                 label: int, texture_amp: float) -> None:
    """Add one cell's per-channel contribution and stamp its truth masks."""
    h, w = shape
    cx, cy = spec.center_xy
    reach = int(np.ceil(spec.cell_radius_px * (1 + spec.eccentricity) + FALLOFF_PX + 1))
    x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    if x0 >= x1 or y0 >= y1:
        return

    dist = _elliptical_distance(y1 - y0, x1 - x0, cx - x0, cy - y0,
                                spec.eccentricity, spec.angle)
    nuc_prof = _blob_profile(dist, spec.nucleus_radius_px)
    cell_prof = _blob_profile(dist, spec.cell_radius_px)

    rng = np.random.default_rng(spec.texture_seed)
    texture = 1.0 + texture_amp * ndimage.gaussian_filter(
        rng.standard_normal(dist.shape), sigma=1.0)
    texture = np.clip(texture, 0.0, None)

    # DAPI marks the nucleus; CK and CD45 fill the whole cell.
    profiles = {"dapi": nuc_prof, "ck": cell_prof, "cd45": cell_prof}
    for ch in CHANNELS:
        accum[ch][y0:y1, x0:x1] += spec.peaks[ch] * profiles[ch] * texture

    nuc_true = nuc_prof >= 0.5
    cell_true = cell_prof >= 0.5
    cell_labels[y0:y1, x0:x1][cell_true] = label
    nucleus_labels[y0:y1, x0:x1][nuc_true] = label


def _finalize_planes(accum: dict, noise: NoiseSpec, rng) -> dict:
    planes = {}
    for ch in CHANNELS:
        expected = accum[ch] + noise.baseline
        img = rng.poisson(np.clip(expected, 0, None)).astype(np.float64) if noise.shot \
            else expected
        if noise.read_sigma > 0:
            img = img + rng.normal(0.0, noise.read_sigma, size=img.shape)
        planes[ch] = np.clip(np.rint(img), 0, 65535).astype(np.uint16)
    return planes


def _place_centers(rng, n: int, w: int, h: int, min_dist: float,
                   margin: float) -> list:
    """Rejection-sample n centers with a pairwise minimum distance.

    A coarse grid hash keeps each attempt O(1), so dense FOVs stay
    affordable; the distance guarantee itself is exact.
    """
    centers = []
    lo_x, hi_x = margin, w - margin
    lo_y, hi_y = margin, h - margin
    if hi_x <= lo_x or hi_y <= lo_y:
        raise PlacementOverflow(f"FOV {w}x{h} too small for margin {margin}")
    min_sq = min_dist * min_dist
    cell_size = max(min_dist, 1.0)
    buckets: dict = {}

    def neighbors(bx, by):
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                yield from buckets.get((bx + dx, by + dy), ())

    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x = rng.uniform(lo_x, hi_x)
            y = rng.uniform(lo_y, hi_y)
            bx, by = int(x / cell_size), int(y / cell_size)
            if all((x - px) ** 2 + (y - py) ** 2 >= min_sq
                   for px, py in neighbors(bx, by)):
                centers.append((x, y))
                buckets.setdefault((bx, by), []).append((x, y))
                break
        else:
            raise PlacementOverflow(
                f"placed {len(centers)}/{n} cells after "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts each")
    return centers


def _fov_seed(seed: int, row: int, col: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(row, col))


def generate_slide(spec: SlideSpec) -> tuple:
    """Render a full synthetic slide and its exact ground truth.

    Deterministic for a fixed ``spec.seed``: cell placement, texture,
    and noise all derive from per-FOV seed sequences.

    Raises
    ------
    PlacementOverflow
        If rejection sampling cannot place all requested cells.
    """
    meta = SlideMeta(
        slide_id=spec.slide_id,
        grid_rows=spec.grid_rows,
        grid_cols=spec.grid_cols,
        fov_width_px=spec.fov_width_px,
        fov_height_px=spec.fov_height_px,
        pixel_size_um=spec.pixel_size_um,
    )
    keys = list(meta.grid_keys())
    root_rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed))

    # Deal the class roster round-robin over FOVs after a seeded shuffle.
    roster = [cls for cls in sorted(spec.counts) for _ in range(spec.counts[cls])]
    root_rng.shuffle(roster)
    per_fov_roster = {key: [] for key in keys}
    for i, cls in enumerate(roster):
        per_fov_roster[keys[i % len(keys)]].append(cls)

    min_dist = spec.min_sep_factor * spec.mean_cell_radius()
    margin = max((spec.radii[c][3] for c in spec.counts if spec.counts[c]), default=4.0)
    margin = margin * (1 + spec.eccentricity) + FALLOFF_PX + 2

    memory = {}
    truth = GroundTruth(slide_id=spec.slide_id)
    shape = (spec.fov_height_px, spec.fov_width_px)
    for key in keys:
        r, c = key
        rng = np.random.default_rng(_fov_seed(spec.seed, r, c))
        classes = per_fov_roster[key]
        centers = _place_centers(rng, len(classes), spec.fov_width_px,
                                 spec.fov_height_px, min_dist, margin)
        cells = []
        for cls, center in zip(classes, centers):
            nuc_lo, nuc_hi, cell_lo, cell_hi = spec.radii[cls]
            cell_r = rng.uniform(cell_lo, cell_hi)
            nuc_r = min(rng.uniform(nuc_lo, nuc_hi), cell_r)
            peaks = {ch: rng.uniform(*spec.intensity[cls][ch]) for ch in CHANNELS}
            cells.append(CellSpec(
                center_xy=center,
                nucleus_radius_px=nuc_r,
                cell_radius_px=cell_r,
                cell_class=cls,
                peaks=peaks,
                texture_seed=int(rng.integers(0, 2**31 - 1)),
                eccentricity=spec.eccentricity,
                angle=rng.uniform(0, np.pi) if spec.eccentricity else 0.0,
            ))

        accum = {ch: np.zeros(shape, dtype=np.float64) for ch in CHANNELS}
        nucleus_labels = np.zeros(shape, dtype=np.uint16)
        cell_labels = np.zeros(shape, dtype=np.uint16)
        for i, cell in enumerate(cells):
            _render_cell(cell, shape, accum, nucleus_labels, cell_labels,
                         i + 1, spec.texture_amp)
        # Re-stamp nuclei so each nucleus mask stays inside its own cell mask
        # even where neighbouring cell masks overlapped.
        for i in range(len(cells)):
            cell_labels[nucleus_labels == i + 1] = i + 1

        memory[key] = _finalize_planes(accum, spec.noise, rng)
        truth.per_fov[key] = FovGroundTruth(
            row=r, col=c, cells=cells,
            nucleus_labels=nucleus_labels, cell_labels=cell_labels)

    return Slide(meta, memory=memory), truth


@dataclass
class CellPatch:
    """A masked cell cutout usable as montage gallery material."""

    planes: dict  # channel -> uint16 patch
    mask: np.ndarray  # bool, cell extent
    nucleus_mask: np.ndarray
    cell_class: CellClass
    spec: CellSpec


def make_cell_patch(cell_class: CellClass, seed: int, size: int = 28,
                    texture_amp: float = 0.05) -> CellPatch:
    """Render a single isolated cell on black for montage planting."""
    rng = np.random.default_rng(seed)
    nuc_lo, nuc_hi, cell_lo, cell_hi = DEFAULT_RADII[cell_class]
    cell_r = rng.uniform(cell_lo, min(cell_hi, size / 2 - FALLOFF_PX - 1))
    nuc_r = min(rng.uniform(nuc_lo, nuc_hi), cell_r)
    peaks = {ch: rng.uniform(*DEFAULT_INTENSITY[cell_class][ch]) for ch in CHANNELS}
    spec = CellSpec(
        center_xy=(size / 2.0, size / 2.0),
        nucleus_radius_px=nuc_r, cell_radius_px=cell_r,
        cell_class=cell_class, peaks=peaks,
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )
    accum = {ch: np.zeros((size, size)) for ch in CHANNELS}
    nuc_labels = np.zeros((size, size), dtype=np.uint16)
    cell_labels = np.zeros((size, size), dtype=np.uint16)
    _render_cell(spec, (size, size), accum, nuc_labels, cell_labels, 1, texture_amp)
    planes = {ch: np.clip(np.rint(accum[ch]), 0, 65535).astype(np.uint16)
              for ch in CHANNELS}
    return CellPatch(planes=planes, mask=cell_labels == 1,
                     nucleus_mask=nuc_labels == 1, cell_class=cell_class, spec=spec)


def plant_montage(background: FieldOfView, gallery: list, n: int,
                  seed: int = 0) -> tuple:
    """Alpha-blend ``n`` gallery patches onto a background FOV.

    Placements are rejection-sampled so patch masks stay pairwise
    disjoint; returned coordinates and masks are exact.
    """
    if n > 0 and not gallery:
        raise ValueError("gallery must be nonempty when n > 0")
    h, w = background.shape
    out = {ch: background.planes[ch].astype(np.float64).copy() for ch in CHANNELS}
    occupied = np.zeros((h, w), dtype=bool)
    truth = FovGroundTruth(row=background.row, col=background.col,
                           nucleus_labels=np.zeros((h, w), dtype=np.uint16),
                           cell_labels=np.zeros((h, w), dtype=np.uint16))
    rng = np.random.default_rng(seed)

    for i in range(n):
        patch = gallery[int(rng.integers(0, len(gallery)))]
        ph, pw = patch.mask.shape
        placed = False
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            x0 = int(rng.integers(0, w - pw + 1))
            y0 = int(rng.integers(0, h - ph + 1))
            window = occupied[y0:y0 + ph, x0:x0 + pw]
            if not (window & patch.mask).any():
                placed = True
                break
        if not placed:
            raise PlacementOverflow(f"placed {i}/{n} montage patches")

        m = patch.mask
        for ch in CHANNELS:
            region = out[ch][y0:y0 + ph, x0:x0 + pw]
            region[m] = patch.planes[ch].astype(np.float64)[m]
        occupied[y0:y0 + ph, x0:x0 + pw] |= m
        truth.cell_labels[y0:y0 + ph, x0:x0 + pw][m] = i + 1
        truth.nucleus_labels[y0:y0 + ph, x0:x0 + pw][patch.nucleus_mask] = i + 1
        src = patch.spec
        truth.cells.append(CellSpec(
            center_xy=(x0 + src.center_xy[0], y0 + src.center_xy[1]),
            nucleus_radius_px=src.nucleus_radius_px,
            cell_radius_px=src.cell_radius_px,
            cell_class=src.cell_class,
            peaks=dict(src.peaks),
            texture_seed=src.texture_seed,
        ))

    planes = {ch: np.clip(np.rint(out[ch]), 0, 65535).astype(np.uint16)
              for ch in CHANNELS}
    fov = FieldOfView(row=background.row, col=background.col, planes=planes)
    return fov, truth


def inject_artefacts(fov: FieldOfView, kinds, n: int, seed: int = 0) -> tuple:
    """Add CK-only artefacts: diffuse flares or tiny bright dye aggregates.

    DAPI and CD45 planes pass through untouched; each artefact is
    labeled in the returned ground truth's artefact plane.
    """
    kinds = list(kinds)
    h, w = fov.shape
    planes = {ch: fov.planes[ch].copy() for ch in CHANNELS}
    truth = FovGroundTruth(row=fov.row, col=fov.col,
                           artefact_labels=np.zeros((h, w), dtype=np.uint16))
    if n == 0 or not kinds:
        return FieldOfView(row=fov.row, col=fov.col, planes=planes), truth

    rng = np.random.default_rng(seed)
    ck = planes["ck"].astype(np.float64)
    for i in range(n):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        yy, xx = np.mgrid[0:h, 0:w]
        dist = np.hypot(xx - cx, yy - cy)
        if kind == "flare":
            sigma = rng.uniform(min(h, w) / 8.0, min(h, w) / 3.0)
            amp = rng.uniform(150.0, 400.0)
            added = amp * np.exp(-0.5 * (dist / sigma) ** 2)
            label_mask = added >= amp * 0.5
            radius = sigma
        elif kind == "dye_aggregate":
            radius = rng.uniform(1.0, 2.5)
            amp = rng.uniform(3000.0, 8000.0)
            added = amp * _blob_profile(dist, radius)
            label_mask = dist <= radius  # speck core, not the soft skirt
        else:
            raise ValueError(f"unknown artefact kind: {kind}")
        ck += added
        truth.artefact_labels[label_mask] = i + 1
        truth.cells.append(CellSpec(
            center_xy=(cx, cy),
            nucleus_radius_px=radius, cell_radius_px=radius,
            cell_class="artefact",
            peaks={"dapi": 0.0, "ck": amp, "cd45": 0.0},
            texture_seed=0,
        ))
    planes["ck"] = np.clip(np.rint(ck), 0, 65535).astype(np.uint16)
    return FieldOfView(row=fov.row, col=fov.col, planes=planes), truth
