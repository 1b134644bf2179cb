"""Nucleus detection on the DAPI channel.

Scale-normalized Laplacian-of-Gaussian blob detection: local maxima of
sigma^2 * LoG responses across a sigma stack (sign flipped so bright
blobs score positive), thresholded, greedily suppressed by a minimum
separation, then refined to sub-pixel with a 3-point parabolic fit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import BadParams
from .slide_io import FieldOfView, crop

DEFAULT_SIGMAS = (3.0, 3.5, 4.2, 5.0, 6.0)


@dataclass(frozen=True)
class DetectParams:
    sigmas: tuple = DEFAULT_SIGMAS
    response_threshold: float = 50.0
    min_separation_px: float = 7.0

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        if not sig or any(s <= 0 for s in sig) or list(sig) != sorted(sig):
            raise BadParams("sigmas must be a nonempty ascending positive sequence")
        if self.response_threshold <= 0:
            raise BadParams("response_threshold must be positive")
        if self.min_separation_px <= 0:
            raise BadParams("min_separation_px must be positive")
        object.__setattr__(self, "sigmas", sig)


@dataclass
class Detection:
    """One detected nucleus: sub-pixel centroid, radius estimate, score."""

    centroid_xy: tuple
    radius_px: float
    score: float

    def to_json(self) -> dict:
        return {
            "centroid": [self.centroid_xy[0], self.centroid_xy[1]],
            "radius_px": self.radius_px,
            "score": self.score,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(centroid_xy=tuple(d["centroid"]), radius_px=d["radius_px"],
                   score=d["score"])


@dataclass
class DetectionMetrics:
    tp: int
    fp: int
    fn: int
    count_f1: float
    mean_centroid_dist_um: float
    matches: list = field(default_factory=list, repr=False)


def _parabolic_offset(lo: float, mid: float, hi: float) -> float:
    denom = lo - 2.0 * mid + hi
    if denom >= 0:  # not a local max along this axis
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


def detect_cells(dapi: np.ndarray, params: DetectParams | None = None) -> list:
    """Detect bright blobs in a single DAPI plane.

    Returns detections sorted by descending score (ties by (y, x));
    all pairwise centroid distances respect ``min_separation_px``.
    """
    params = params or DetectParams()
    if dapi.size == 0:
        raise BadParams("empty plane")
    img = np.ascontiguousarray(dapi, dtype=np.float64)
    h, w = img.shape

    sigmas = params.sigmas
    stack = np.empty((len(sigmas), h, w))
    for k, sigma in enumerate(sigmas):
        # Reflect padding avoids false blobs hugging the FOV border.
        stack[k] = -(sigma ** 2) * ndimage.gaussian_laplace(img, sigma, mode="reflect")

    footprint = np.ones((3, 3, 3), dtype=bool)
    local_max = (stack == ndimage.maximum_filter(stack, footprint=footprint,
                                                 mode="reflect"))
    candidates = np.argwhere(local_max & (stack > params.response_threshold))
    if candidates.size == 0:
        return []

    scores = stack[candidates[:, 0], candidates[:, 1], candidates[:, 2]]
    # Deterministic greedy NMS: best score first, ties broken by (y, x).
    order = np.lexsort((candidates[:, 2], candidates[:, 1], -scores))
    cand = candidates[order]
    scr = scores[order]

    kept_yx = []
    kept_idx = []
    tree = None
    min_sep = params.min_separation_px
    for i in range(len(cand)):
        y, x = float(cand[i, 1]), float(cand[i, 2])
        if kept_yx:
            if tree is None or len(kept_yx) != tree.n:
                tree = cKDTree(np.asarray(kept_yx))
            if tree.query_ball_point([y, x], r=min_sep, return_sorted=False):
                continue
        kept_yx.append([y, x])
        kept_idx.append(i)

    detections = []
    n_sig = len(sigmas)
    for i in kept_idx:
        k, y, x = int(cand[i, 0]), int(cand[i, 1]), int(cand[i, 2])
        plane = stack[k]
        dx = _parabolic_offset(plane[y, x - 1], plane[y, x], plane[y, x + 1]) \
            if 0 < x < w - 1 else 0.0
        dy = _parabolic_offset(plane[y - 1, x], plane[y, x], plane[y + 1, x]) \
            if 0 < y < h - 1 else 0.0
        # Refine sigma on the log-spaced stack for a smoother radius estimate.
        if 0 < k < n_sig - 1:
            ds = _parabolic_offset(stack[k - 1, y, x], plane[y, x], stack[k + 1, y, x])
            step = sigmas[k + 1] - sigmas[k] if ds >= 0 else sigmas[k] - sigmas[k - 1]
            sigma = sigmas[k] + ds * step
        else:
            sigma = sigmas[k]
        cx = float(np.clip(x + dx, 0, w - 1))
        cy = float(np.clip(y + dy, 0, h - 1))
        detections.append(Detection(
            centroid_xy=(cx, cy),
            radius_px=float(sigma * np.sqrt(2.0)),
            score=float(plane[y, x]),
        ))
    detections.sort(key=lambda d: (-d.score, d.centroid_xy[1], d.centroid_xy[0]))
    return detections


def evaluate_detection(pred: list, truth: list, max_match_dist_px: float,
                       pixel_size_um: float = 0.5) -> DetectionMetrics:
    """Greedy mutual-nearest matching of predictions to ground truth.

    Candidate pairs within ``max_match_dist_px`` are consumed closest
    first; leftovers count as false positives / false negatives. The
    mean centroid distance over matches is reported in micrometers.
    """
    if max_match_dist_px <= 0:
        raise BadParams("max_match_dist_px must be positive")
    pred_pts = np.asarray([p.centroid_xy if isinstance(p, Detection) else p
                           for p in pred], dtype=float).reshape(-1, 2)
    true_pts = np.asarray([t.centroid_xy if isinstance(t, Detection) else t
                           for t in truth], dtype=float).reshape(-1, 2)

    pairs = []
    if len(pred_pts) and len(true_pts):
        tree = cKDTree(true_pts)
        for i, pt in enumerate(pred_pts):
            for j in tree.query_ball_point(pt, r=max_match_dist_px):
                d = float(np.hypot(*(pt - true_pts[j])))
                pairs.append((d, i, j))
        pairs.sort()

    used_pred, used_true = set(), set()
    matches = []
    for d, i, j in pairs:
        if i in used_pred or j in used_true:
            continue
        used_pred.add(i)
        used_true.add(j)
        matches.append((i, j, d))

    tp = len(matches)
    fp = len(pred_pts) - tp
    fn = len(true_pts) - tp
    denom = 2 * tp + fp + fn
    f1 = (2.0 * tp / denom) if denom else 0.0
    mean_um = (float(np.mean([d for _, _, d in matches])) * pixel_size_um
               if matches else 0.0)
    return DetectionMetrics(tp=tp, fp=fp, fn=fn, count_f1=f1,
                            mean_centroid_dist_um=mean_um, matches=matches)


def crop_detections(fov: FieldOfView, detections: list, size: int = 24) -> list:
    """One 3-channel thumbnail per detection, preserving detection order."""
    return [crop(fov, det.centroid_xy, size) for det in detections]
