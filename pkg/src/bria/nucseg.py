"""Nucleus segmentation inside a DAPI thumbnail.

The transform scores each pixel by how strongly the image gradient
points back toward the detection center (a Gaussian-weighted dot product
of the outward normal field and the Sobel gradient field), which turns
the nucleus edge into a bright ring while suppressing neighbours. Otsu
thresholding of that ring plus a center flood fill yields the mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, EmptyMask

KAPPA = 1.5  # Gaussian weight width as a multiple of the detection radius
OTSU_BINS = 256

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class NuclearMask:
    """Binary nucleus mask in thumbnail coordinates."""

    mask: np.ndarray
    area_px: int
    offset_xy: tuple = (0, 0)
    used_fallback: bool = False

    def to_fov_coords(self) -> np.ndarray:
        ys, xs = np.nonzero(self.mask)
        return np.stack([xs + self.offset_xy[0], ys + self.offset_xy[1]], axis=1)


def otsu_split(counts: np.ndarray) -> int:
    """Split index maximizing between-class variance of a histogram.

    Bins ``0..k`` form the lower class, ``k+1..`` the upper; ties break
    toward the smaller k. Integer bin counts keep the partial sums exact,
    so this matches an exhaustive scan bit-for-bit.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise DegenerateInput("histogram needs at least two bins")
    total = counts.sum()
    if total <= 0 or np.count_nonzero(counts) < 2:
        raise DegenerateInput("histogram mass concentrated in one bin")

    idx = np.arange(len(counts), dtype=np.float64)
    w0 = np.cumsum(counts)[:-1]
    w1 = total - w0
    s0 = np.cumsum(counts * idx)[:-1]
    s1 = (counts * idx).sum() - s0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.zeros_like(w0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(w0), where=valid)
    mu1 = np.divide(s1, w1, out=np.zeros_like(w1), where=valid)
    var_between[valid] = w0[valid] * w1[valid] * (mu0[valid] - mu1[valid]) ** 2
    return int(np.argmax(var_between))


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Otsu threshold of a plane or sample over a ``bins``-bin histogram.

    Returns the upper edge of the chosen lower-class bin, so
    ``values > threshold`` selects the upper class.

    Raises
    ------
    DegenerateInput
        If all values are equal (callers fall back to other cues).
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DegenerateInput("empty input")
    vmin, vmax = float(flat.min()), float(flat.max())
    if vmin == vmax:
        raise DegenerateInput("constant input")
    counts, edges = np.histogram(flat, bins=bins, range=(vmin, vmax))
    k = otsu_split(counts)
    return float(edges[k + 1])


def radial_transform(dapi_thumb: np.ndarray, center, radius_px: float,
                     kappa: float = KAPPA) -> np.ndarray:
    """Gaussian-weighted inward-gradient response around ``center``.

    ``B(p) = w(p) * max(0, -<n(p), grad I(p)>)`` with ``n`` the outward
    unit vector from the center, Sobel gradients (reflect padding) and
    ``w(p) = exp(-|p - c|^2 / (2 (kappa * radius_px)^2))``.
    """
    if radius_px <= 0:
        raise ValueError("radius_px must be positive")
    img = np.asarray(dapi_thumb, dtype=np.float64)
    gx = ndimage.sobel(img, axis=1, mode="reflect")
    gy = ndimage.sobel(img, axis=0, mode="reflect")

    h, w = img.shape
    cx, cy = float(center[0]), float(center[1])
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx
    dy = yy - cy
    dist = np.hypot(dx, dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        nx = np.where(dist > 0, dx / dist, 0.0)
        ny = np.where(dist > 0, dy / dist, 0.0)

    inward = np.maximum(0.0, -(nx * gx + ny * gy))
    weight = np.exp(-(dist ** 2) / (2.0 * (kappa * radius_px) ** 2))
    return weight * inward


def _center_component(mask: np.ndarray, cx: int, cy: int) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=FOUR_CONN)
    if n == 0 or not mask[cy, cx]:
        return np.zeros_like(mask)
    return labels == labels[cy, cx]


def segment_nucleus(dapi_thumb: np.ndarray, center, radius_px: float,
                    kappa: float = KAPPA) -> NuclearMask:
    """Segment the nucleus around ``center`` (thumbnail coordinates).

    Ring path: Otsu the radial transform, dilate the supra-threshold
    ring by 1 px, flood-fill from the center inside the ring's
    complement (restricted to a disk of radius ``2 * radius_px``), then
    merge the fill with the ring band and re-center on the gradient peak
    with a 1 px erosion. If the ring fails to enclose the center, fall
    back to Otsu on the Gaussian-weighted intensities.

    Raises
    ------
    EmptyMask
        If both paths produce no pixels.
    """
    img = np.asarray(dapi_thumb, dtype=np.float64)
    h, w = img.shape
    cx = int(np.clip(round(center[0]), 0, w - 1))
    cy = int(np.clip(round(center[1]), 0, h - 1))

    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(xx - cx, yy - cy)
    disk = dist <= 2.0 * radius_px

    mask = np.zeros((h, w), dtype=bool)
    used_fallback = False
    response = radial_transform(img, (cx, cy), radius_px, kappa=kappa)
    try:
        supra = response > otsu_threshold(response)
    except DegenerateInput:
        supra = np.zeros((h, w), dtype=bool)

    if supra.any() and not supra[cy, cx]:
        ring = ndimage.binary_dilation(supra, structure=np.ones((3, 3), dtype=bool))
        interior = _center_component(~ring & disk, cx, cy)
        # Ring must enclose the center: a fill that escapes to the disk rim
        # (or the thumbnail border) means it did not.
        rim = dist >= 2.0 * radius_px - 1.5
        border = np.zeros((h, w), dtype=bool)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        if interior.any() and not (interior & (rim | border)).any():
            band = supra & ndimage.binary_dilation(
                interior, structure=np.ones((3, 3), dtype=bool), iterations=3)
            mask = ndimage.binary_fill_holes(interior | band)
            mask = ndimage.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))
            mask = _center_component(mask & disk, cx, cy)
            mask = ndimage.binary_fill_holes(mask)

    if not mask.any():
        used_fallback = True
        weight = np.exp(-(dist ** 2) / (2.0 * (kappa * radius_px) ** 2))
        weighted = weight * img
        try:
            t = otsu_threshold(weighted[disk])
        except DegenerateInput:
            raise EmptyMask("thumbnail carries no usable signal")
        mask = _center_component((weighted > t) & disk, cx, cy)
        mask = ndimage.binary_fill_holes(mask)

    if not mask.any():
        raise EmptyMask("no nucleus pixels found by either path")
    return NuclearMask(mask=mask, area_px=int(mask.sum()), used_fallback=used_fallback)
