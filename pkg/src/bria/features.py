"""Per-cell feature extraction: 122 named values per thumbnail.

8 morphology (nucleus + cell masks), 44 intensity (MFIs, quartiles,
CK+ ratios, channel correlations and co-localizations, CK thumbnail
stats) and 70 texture (Gabor bank, Laws bank, LBP channel similarity).
The global ordering and naming are fixed by ``FEATURE_NAMES``; quality
issues surface as flags, never as missing values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from scipy.stats import rankdata

from .errors import DegenerateInput
from .nucseg import otsu_threshold
from .slide_io import CHANNELS

CHANNEL_PAIRS = (("dapi", "ck"), ("dapi", "cd45"), ("ck", "cd45"))
RWC_PAIRS = (("ck", "dapi"), ("ck", "cd45"))
OBJECTS = ("Nuc", "Cell")

GABOR_THETAS_DEG = (0, 45, 90, 135)
GABOR_FREQS = (0.1, 0.4)  # spatial frequency, cycles/px
GABOR_SIGMAS = (1, 3)

LAWS_VECTORS = {
    "L5": np.array([1, 4, 6, 4, 1], dtype=np.float64),
    "E5": np.array([-1, -2, 0, 2, 1], dtype=np.float64),
    "S5": np.array([-1, 0, 2, 0, -1], dtype=np.float64),
    "R5": np.array([1, -4, 6, -4, 1], dtype=np.float64),
}
LAWS_ORDER = ("L5", "E5", "S5", "R5")

# Clockwise 8-neighborhood starting at the east neighbor (y grows down).
LBP_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1))


def _build_names() -> tuple:
    names = []
    for obj in OBJECTS:
        names += [f"{obj}_Size", f"{obj}_Roundness", f"{obj}_Elongation", f"{obj}_Hu1"]
    for obj in OBJECTS:
        names += [f"{obj}_MFI_{ch}" for ch in CHANNELS]
    for obj in OBJECTS:
        for ch in CHANNELS:
            names += [f"{obj}_{stat}_{ch}" for stat in ("LQI", "MQI", "UQI", "IQR")]
    names += [f"{obj}_CKplus_ratio" for obj in OBJECTS]
    for obj in OBJECTS:
        names += [f"{obj}_Corr_{a}_{b}" for a, b in CHANNEL_PAIRS]
    for obj in OBJECTS:
        names += [f"{obj}_Coloc_{a}_{b}" for a, b in RWC_PAIRS]
    names += ["MEAN_ck", "STD_ck"]
    for theta in GABOR_THETAS_DEG:
        for freq in GABOR_FREQS:
            for sigma in GABOR_SIGMAS:
                names += [f"Gabor_t{theta}_f{freq}_s{sigma}_{stat}"
                          for stat in ("mean", "std")]
    for rf in LAWS_ORDER:
        for cf in LAWS_ORDER:
            names += [f"Laws_{rf}{cf}_{stat}" for stat in ("mean", "std")]
    for a, b in CHANNEL_PAIRS:
        names += [f"LBP_Corr_{a}_{b}", f"LBP_NMI_{a}_{b}"]
    return tuple(names)


FEATURE_NAMES = _build_names()
N_FEATURES = len(FEATURE_NAMES)
assert N_FEATURES == 122

FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}


def schema_hash() -> str:
    return hashlib.sha256(",".join(FEATURE_NAMES).encode()).hexdigest()[:16]


@dataclass
class MaskedObject:
    """A binary mask plus the channel planes it indexes."""

    mask: np.ndarray
    planes: dict
    role: str  # "nucleus" | "cell"

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError(f"{self.role} mask is empty")
        for ch, plane in self.planes.items():
            if plane.shape != self.mask.shape:
                raise ValueError(f"plane {ch} shape differs from mask")

    def values(self, channel: str) -> np.ndarray:
        return self.planes[channel][self.mask].astype(np.float64)


@dataclass
class FeatureVector:
    """Ordered, named 122-dimensional descriptor of one cell."""

    values: np.ndarray
    quality_flags: list = field(default_factory=list)

    names = FEATURE_NAMES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} values, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature values must all be finite")

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_INDEX[name]])

    def to_json(self) -> dict:
        return {"values": self.values.tolist(), "quality_flags": list(self.quality_flags)}

    @classmethod
    def from_json(cls, d: dict) -> "FeatureVector":
        return cls(values=np.asarray(d["values"]), quality_flags=list(d.get("quality_flags", [])))


# --- morphology ---

def morphology_features(mask: np.ndarray) -> tuple:
    """(Size, Roundness, Elongation, Hu1) of a binary mask.

    Roundness is ``4 pi A / Cp^2`` with ``Cp`` the convex-hull perimeter
    of the pixel centers; Elongation is ``4 A / (pi lm^2)`` with ``lm``
    the major-axis length of the moment-equivalent ellipse; Hu1 uses
    normalized central moments. Degenerate masks (single pixel or
    collinear) return (A, 1, 1, 0) with a flag instead of failing.
    """
    ys, xs = np.nonzero(mask)
    area = float(len(xs))
    flags = []
    if area == 0:
        raise ValueError("empty mask")
    if area == 1:
        return (1.0, 1.0, 1.0, 0.0), ["degenerate_mask"]

    x0, y0 = xs.mean(), ys.mean()
    dx, dy = xs - x0, ys - y0
    mu20 = float((dx * dx).sum())
    mu02 = float((dy * dy).sum())
    mu11 = float((dx * dy).sum())
    hu1 = (mu20 + mu02) / (area * area)

    cov_tr = (mu20 + mu02) / area
    cov_det = (mu20 * mu02 - mu11 * mu11) / (area * area)
    lam_max = cov_tr / 2.0 + np.sqrt(max(cov_tr * cov_tr / 4.0 - cov_det, 0.0))
    if lam_max <= 0:
        return (area, 1.0, 1.0, hu1), ["degenerate_mask"]
    major_len = 4.0 * np.sqrt(lam_max)
    elongation = 4.0 * area / (np.pi * major_len * major_len)

    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    try:
        perimeter = float(ConvexHull(pts).area)  # 2D hull "area" is perimeter
    except QhullError:
        # collinear mask: open polyline traversed both ways
        span = float(np.hypot(xs.max() - xs.min(), ys.max() - ys.min()))
        perimeter = 2.0 * span
        flags.append("degenerate_mask")
    roundness = 4.0 * np.pi * area / (perimeter * perimeter) if perimeter > 0 else 1.0
    return (area, roundness, elongation, hu1), flags


# --- intensity ---

def rwc(ch_a: np.ndarray, ch_b: np.ndarray, mask: np.ndarray | None = None,
        thresholds: tuple | None = None) -> float:
    """Ranked-weighted co-localization of two channels within a mask.

    Pixels co-localize when above both channel thresholds (per-channel
    Otsu within the mask unless explicit ``thresholds`` are given);
    each contributes its channel-a intensity scaled by how close the
    two channel ranks agree. Falls in [0, 1] for nonnegative inputs;
    an empty co-localized set (or degenerate channel) scores 0.
    """
    a = np.asarray(ch_a, dtype=np.float64)
    b = np.asarray(ch_b, dtype=np.float64)
    if mask is not None:
        a, b = a[mask], b[mask]
    a, b = a.ravel(), b.ravel()
    n = a.size
    if n == 0:
        raise ValueError("mask selects no pixels")
    total = a.sum()
    if total <= 0:
        return 0.0
    if thresholds is not None:
        ta, tb = thresholds
    else:
        try:
            ta = otsu_threshold(a)
            tb = otsu_threshold(b)
        except DegenerateInput:
            return 0.0
    coloc = (a > ta) & (b > tb)
    if not coloc.any():
        return 0.0
    ra = rankdata(a, method="average")
    rb = rankdata(b, method="average")
    weights = (n - np.abs(ra - rb)) / n
    return float((a[coloc] * weights[coloc]).sum() / total)


def _pearson(a: np.ndarray, b: np.ndarray) -> tuple:
    """Pearson correlation; zero-variance inputs give 0 with a flag."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da * da).sum(), (db * db).sum()
    if va == 0 or vb == 0:
        return 0.0, ["zero_variance_corr"]
    return float((da * db).sum() / np.sqrt(va * vb)), []


def intensity_features(nuc: MaskedObject, cell: MaskedObject, thumb_planes: dict,
                       ck_cutoff: float) -> tuple:
    """The 44 intensity values in schema order, plus quality flags."""
    values = []
    flags = []
    objs = (nuc, cell)

    for obj in objs:
        values += [float(obj.values(ch).mean()) for ch in CHANNELS]
    for obj in objs:
        for ch in CHANNELS:
            v = obj.values(ch)
            lqi, mqi, uqi = np.percentile(v, [25.0, 50.0, 75.0])
            values += [float(lqi), float(mqi), float(uqi), float(uqi - lqi)]
    for obj in objs:
        ck_vals = obj.values("ck")
        values.append(float((ck_vals > ck_cutoff).sum() / ck_vals.size))
    for obj in objs:
        for a, b in CHANNEL_PAIRS:
            r, fl = _pearson(obj.values(a), obj.values(b))
            values.append(r)
            flags += fl
    for obj in objs:
        # per-object Otsu thresholds, shared across the co-localization pairs
        cuts = {}
        for ch in {c for pair in RWC_PAIRS for c in pair}:
            try:
                cuts[ch] = otsu_threshold(obj.values(ch))
            except DegenerateInput:
                cuts[ch] = None
        for a, b in RWC_PAIRS:
            if cuts[a] is None or cuts[b] is None:
                values.append(0.0)
            else:
                values.append(rwc(obj.values(a), obj.values(b),
                                  thresholds=(cuts[a], cuts[b])))
    ck_thumb = thumb_planes["ck"].astype(np.float64)
    values += [float(ck_thumb.mean()), float(ck_thumb.std())]
    return values, flags


# --- texture ---

def gabor_kernel(theta_deg: float, freq: float, sigma: float) -> np.ndarray:
    """Real Gabor kernel, size 6*sigma+1, unit aspect, zero phase."""
    half = int(3 * sigma)
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    theta = np.deg2rad(theta_deg)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    return np.exp(-(xr * xr + yr * yr) / (2.0 * sigma * sigma)) \
        * np.cos(2.0 * np.pi * freq * xr)


def _gabor_bank() -> list:
    if not hasattr(_gabor_bank, "_cache"):
        _gabor_bank._cache = [
            gabor_kernel(theta, freq, sigma)
            for theta in GABOR_THETAS_DEG
            for freq in GABOR_FREQS
            for sigma in GABOR_SIGMAS
        ]
    return _gabor_bank._cache


def gabor_features(ck_thumb: np.ndarray) -> list:
    """Mean and std of the response for the fixed 16-filter bank."""
    return gabor_features_stack(np.asarray(ck_thumb, dtype=np.float64)[None])[0]


def gabor_features_stack(stack: np.ndarray) -> list:
    """Gabor stats for a (N, H, W) stack of thumbnails in one pass.

    A singleton kernel axis keeps the convolution from mixing
    neighbouring thumbnails, so results match the per-image path
    exactly while amortizing the filter calls.
    """
    stack = np.asarray(stack, dtype=np.float64)
    n = stack.shape[0]
    out = [[] for _ in range(n)]
    for kernel in _gabor_bank():
        resp = ndimage.convolve(stack, kernel[None], mode="reflect")
        means = resp.mean(axis=(1, 2))
        stds = resp.std(axis=(1, 2))
        for i in range(n):
            out[i] += [float(means[i]), float(stds[i])]
    return out


def laws_features(ck_thumb: np.ndarray) -> list:
    """Laws texture energies: 16 ordered 5x5 kernels after mean removal.

    Each kernel is the outer product of a row filter and a column
    filter from (L5, E5, S5, R5); outputs are mean(|response|) and
    std(response) per kernel.
    """
    return laws_features_stack(np.asarray(ck_thumb, dtype=np.float64)[None])[0]


def laws_features_stack(stack: np.ndarray) -> list:
    """Laws stats for a (N, H, W) stack; each image mean-removed first."""
    stack = np.asarray(stack, dtype=np.float64)
    stack = stack - stack.mean(axis=(1, 2), keepdims=True)
    n = stack.shape[0]
    out = [[] for _ in range(n)]
    for rf in LAWS_ORDER:
        for cf in LAWS_ORDER:
            kernel = np.outer(LAWS_VECTORS[rf], LAWS_VECTORS[cf])
            resp = ndimage.convolve(stack, kernel[None], mode="reflect")
            abs_means = np.abs(resp).mean(axis=(1, 2))
            stds = resp.std(axis=(1, 2))
            for i in range(n):
                out[i] += [float(abs_means[i]), float(stds[i])]
    return out


def lbp_codes(img: np.ndarray) -> np.ndarray:
    """8-neighbor radius-1 LBP code image (reflect-padded borders).

    Comparator: bit set iff neighbor > center (the classical definition;
    a strictly-greater-than-one variant floating around in derived
    write-ups is treated as a typo).
    """
    img = np.asarray(img, dtype=np.float64)
    padded = np.pad(img, 1, mode="reflect")
    h, w = img.shape
    codes = np.zeros((h, w), dtype=np.uint8)
    for bit, (dy, dx) in enumerate(LBP_OFFSETS):
        neighbor = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        codes |= ((neighbor - img) > 0).astype(np.uint8) << bit
    return codes


def _entropy_from_counts(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    return -float((p * np.log(p)).sum())


def _nmi_from_codes(x: np.ndarray, y: np.ndarray) -> float:
    """Normalized mutual information over the 256x256 joint code histogram.

    Computed from observed-cell counts (H(X) + H(Y) - H(X,Y) form),
    which is exact and avoids materializing the mostly-empty table.
    """
    xf = x.ravel().astype(np.int64)
    yf = y.ravel().astype(np.int64)
    hx = _entropy_from_counts(np.unique(xf, return_counts=True)[1].astype(np.float64))
    hy = _entropy_from_counts(np.unique(yf, return_counts=True)[1].astype(np.float64))
    if hx + hy == 0.0:
        return 1.0  # both code images constant: identical structure
    hxy = _entropy_from_counts(
        np.unique(xf * 256 + yf, return_counts=True)[1].astype(np.float64))
    mi = max(hx + hy - hxy, 0.0)
    return 2.0 * mi / (hx + hy)


def lbp_features(thumb_planes: dict) -> tuple:
    """Correlation and NMI of LBP code images per channel pair."""
    codes = {ch: lbp_codes(thumb_planes[ch]) for ch in CHANNELS}
    values = []
    flags = []
    for a, b in CHANNEL_PAIRS:
        r, fl = _pearson(codes[a], codes[b])
        values += [r]
        flags += [f"lbp_{f}" for f in fl]
        values += [_nmi_from_codes(codes[a], codes[b])]
    return values, flags


# --- assembly ---

@dataclass
class FeatureConfig:
    ck_cutoff: float = 300.0  # slide background CK mean + 2 std, set per slide


def _nontexture_blocks(thumb_planes: dict, nuc_mask: np.ndarray,
                       cell_mask: np.ndarray, config: FeatureConfig) -> tuple:
    nuc = MaskedObject(mask=nuc_mask, planes=thumb_planes, role="nucleus")
    cell = MaskedObject(mask=cell_mask, planes=thumb_planes, role="cell")
    values = []
    flags = []
    for obj in (nuc, cell):
        morph, fl = morphology_features(obj.mask)
        values += list(morph)
        flags += [f"{obj.role}_{f}" for f in fl]
    ints, fl = intensity_features(nuc, cell, thumb_planes, config.ck_cutoff)
    values += ints
    flags += fl
    return values, flags


def _finish_vector(values: list, flags: list) -> FeatureVector:
    arr = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(arr)
    if bad.any():
        arr = np.where(bad, 0.0, arr)
        flags.append("nonfinite_replaced")
    return FeatureVector(values=arr, quality_flags=flags)


def extract(thumb_planes: dict, nuc_mask: np.ndarray, cell_mask: np.ndarray,
            config: FeatureConfig | None = None) -> FeatureVector:
    """Assemble the full 122-value vector for one cell.

    Sub-block order: nucleus morphology, cell morphology, intensity,
    Gabor, Laws, LBP. Degenerate sub-results become flagged finite
    values so downstream classification always sees a complete vector.
    """
    config = config or FeatureConfig()
    values, flags = _nontexture_blocks(thumb_planes, nuc_mask, cell_mask, config)
    values += gabor_features(thumb_planes["ck"])
    values += laws_features(thumb_planes["ck"])
    lbp, fl = lbp_features(thumb_planes)
    values += lbp
    flags += fl
    return _finish_vector(values, flags)


def extract_batch(cells: list, config: FeatureConfig | None = None) -> list:
    """``extract`` over many (thumb_planes, nuc_mask, cell_mask) triples.

    Texture banks run once per stacked batch instead of per cell;
    values are identical to the per-cell path.
    """
    config = config or FeatureConfig()
    if not cells:
        return []
    ck_stack = np.stack([np.asarray(planes["ck"], dtype=np.float64)
                         for planes, _, _ in cells])
    gabor_all = gabor_features_stack(ck_stack)
    laws_all = laws_features_stack(ck_stack)
    out = []
    for i, (planes, nuc_mask, cell_mask) in enumerate(cells):
        values, flags = _nontexture_blocks(planes, nuc_mask, cell_mask, config)
        values += gabor_all[i]
        values += laws_all[i]
        lbp, fl = lbp_features(planes)
        values += lbp
        flags += fl
        out.append(_finish_vector(values, flags))
    return out
