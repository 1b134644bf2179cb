"""Slide-level orchestration: detect, segment, featurize, classify, export.

FOVs are processed by a bounded worker pool sharing only immutable
state (slide handle, config, model); results merge through a single
deterministic reducer sorted by (row, col, detection index), so output
bytes are identical regardless of worker count.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import cellseg, nucseg
from .classify import (
    DEFAULT_RULES,
    Normalizer,
    RuleSet,
    SVMModel,
    load_model,
    predict,
    rule_filter,
)
from .detect import DetectParams, crop_detections, detect_cells
from .errors import BriaError, EmptyMask, IoFailure
from .features import (
    FEATURE_NAMES,
    FeatureConfig,
    FeatureVector,
    extract_batch,
    schema_hash,
)
from .slide_io import (
    ANALYSIS_THUMB_PX,
    CHANNELS,
    DISPLAY_THUMB_PX,
    QCReport,
    Slide,
    crop,
    load_slide,
)

COMPOSITE_RGB = ("cd45", "ck", "dapi")  # channel per color plane


@dataclass
class PipelineConfig:
    """Every stage's knobs in one serializable block."""

    sigmas: tuple = DetectParams.sigmas
    response_threshold: float = DetectParams.response_threshold
    min_separation_px: float = DetectParams.min_separation_px
    thumbnail_px: int = ANALYSIS_THUMB_PX
    display_px: int = DISPLAY_THUMB_PX
    kappa: float = nucseg.KAPPA
    patch_px: int = 512
    patch_overlap_px: int = 64
    ck_cutoff: float | None = None  # None: slide background CK mean + 2 std
    rules: RuleSet = field(default_factory=lambda: RuleSet.from_json(DEFAULT_RULES.to_json()))
    model_path: str | None = None
    rules_only: bool = False
    classifier_on_all: bool = False
    workers: int = 4
    seed: int = 0

    def detect_params(self) -> DetectParams:
        return DetectParams(sigmas=tuple(self.sigmas),
                            response_threshold=self.response_threshold,
                            min_separation_px=self.min_separation_px)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "response_threshold", "min_separation_px", "thumbnail_px",
            "display_px", "kappa", "patch_px", "patch_overlap_px", "ck_cutoff",
            "model_path", "rules_only", "classifier_on_all", "workers", "seed")}
        d["sigmas"] = list(self.sigmas)
        d["rules"] = self.rules.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        d["sigmas"] = tuple(d.get("sigmas", DetectParams.sigmas))
        d["rules"] = RuleSet.from_json(d.get("rules", DEFAULT_RULES.to_json()))
        return cls(**d)

    def config_hash(self) -> str:
        # Worker count is an execution detail: exports must be byte-identical
        # across pool sizes, so it stays out of the hash.
        d = self.to_json()
        d.pop("workers")
        canon = json.dumps(d, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class Candidate:
    """One exported cell: identity, scores, MFIs, crops and masks."""

    cand_id: str
    fov: tuple
    detection_index: int
    centroid_xy: tuple
    radius_px: float
    probability: float | None
    rule_pass: bool
    label: str
    mfi: dict  # {"nuc": {ch: float}, "cell": {ch: float}}
    features: FeatureVector
    display_planes: dict  # channel -> uint16 display crop
    nuc_mask: np.ndarray  # bool, analysis-thumb frame
    cell_mask: np.ndarray
    mask_offset_xy: tuple
    quality_flags: list = field(default_factory=list)


@dataclass
class SlideResult:
    slide_id: str
    config: PipelineConfig
    counts: dict
    candidates: list
    qc: QCReport
    timings: dict
    ck_cutoff: float

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()


@dataclass
class _FovOutcome:
    key: tuple
    n_detected: int = 0
    n_segmented: int = 0
    n_rule_passed: int = 0
    n_classifier_evaluated: int = 0
    n_classifier_passed: int = 0
    candidates: list = field(default_factory=list)
    channel_stats: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    detections: list = field(default_factory=list)


def _background_ck_stats(planes: dict) -> tuple:
    """(sum, sumsq, count) of CK pixels below the plane's Otsu split."""
    ck = planes["ck"].astype(np.float64)
    try:
        t = nucseg.otsu_threshold(ck)
    except BriaError:
        t = np.inf
    bg = ck[ck <= t]
    if bg.size == 0:
        bg = ck.ravel()
    return float(bg.sum()), float((bg * bg).sum()), int(bg.size)


def _mfi_block(fv: FeatureVector) -> dict:
    return {
        "nuc": {ch: fv[f"Nuc_MFI_{ch}"] for ch in CHANNELS},
        "cell": {ch: fv[f"Cell_MFI_{ch}"] for ch in CHANNELS},
    }


def _process_fov(slide: Slide, key: tuple, config: PipelineConfig,
                 model: SVMModel | None, normalizer: Normalizer | None,
                 ck_cutoff: float) -> _FovOutcome:
    r, c = key
    out = _FovOutcome(key=key)
    fov = slide.fov(r, c)
    for ch in CHANNELS:
        plane = fov.planes[ch]
        out.channel_stats[ch] = (int(plane.min()), int(plane.max()),
                                 float(plane.sum()), plane.size)
        if not plane.any():
            out.failures.append(f"all-zero plane: r{r}c{c} channel {ch}")

    detections = detect_cells(fov.planes["dapi"], config.detect_params())
    out.detections = detections
    out.n_detected = len(detections)
    if not detections:
        return out

    thumbs = crop_detections(fov, detections, size=config.thumbnail_px)

    windows = cellseg.patch_plan(fov.shape, patch=config.patch_px,
                                 overlap=config.patch_overlap_px,
                                 detections=detections)
    patches = []
    for (x0, y0, pw, ph) in windows:
        sub = type(fov)(row=r, col=c, planes={
            ch: fov.planes[ch][y0:y0 + ph, x0:x0 + pw] for ch in CHANNELS})
        try:
            patches.append((cellseg.classical_probmaps(sub), (x0, y0)))
        except BriaError:
            continue
    label_plane = None
    label_by_det = {}
    if patches:
        try:
            maps = cellseg.merge_patches(patches, fov.shape, fill_uncovered=True)
            label_plane, cell_masks = cellseg.instance_segment(maps, detections)
            label_by_det = {m.detection_index: m for m in cell_masks}
        except BriaError as exc:
            out.failures.append(f"cell segmentation failed on r{r}c{c}: {exc}")

    feat_config = FeatureConfig(ck_cutoff=ck_cutoff)
    segmented = []  # (det index, thumb, NuclearMask, cell_mask, flags)
    for i, det in enumerate(detections):
        thumb = thumbs[i]
        local_center = (det.centroid_xy[0] - thumb.x0, det.centroid_xy[1] - thumb.y0)
        try:
            nuc = nucseg.segment_nucleus(thumb.planes["dapi"], local_center,
                                         det.radius_px, kappa=config.kappa)
        except EmptyMask:
            continue
        out.n_segmented += 1
        flags = ["nucseg_fallback"] if nuc.used_fallback else []

        cell_mask = np.zeros_like(nuc.mask)
        cm = label_by_det.get(i)
        if cm is not None and label_plane is not None:
            full = np.zeros(fov.shape, dtype=bool)
            full[cm.y0:cm.y0 + cm.mask.shape[0], cm.x0:cm.x0 + cm.mask.shape[1]] = cm.mask
            sx0, sx1 = max(thumb.x0, 0), min(thumb.x0 + thumb.size, fov.shape[1])
            sy0, sy1 = max(thumb.y0, 0), min(thumb.y0 + thumb.size, fov.shape[0])
            cell_mask[sy0 - thumb.y0:sy1 - thumb.y0, sx0 - thumb.x0:sx1 - thumb.x0] = \
                full[sy0:sy1, sx0:sx1]
        cell_mask |= nuc.mask  # the cell contains its nucleus
        if not (cell_mask & ~nuc.mask).any():
            flags.append("cell_mask_degenerate")
        segmented.append((i, thumb, nuc, cell_mask, flags))

    vectors = extract_batch(
        [(thumb.planes, nuc.mask, cell_mask)
         for _, thumb, nuc, cell_mask, _ in segmented], feat_config)

    for (i, thumb, nuc, cell_mask, flags), fv in zip(segmented, vectors):
        det = detections[i]
        flags = flags + fv.quality_flags
        passed_rules = rule_filter(fv, config.rules)
        out.n_rule_passed += passed_rules

        probability = None
        label = "negative"
        is_candidate = False
        if config.rules_only or model is None:
            is_candidate = passed_rules
            label = "candidate" if passed_rules else "negative"
        else:
            if passed_rules or config.classifier_on_all:
                out.n_classifier_evaluated += 1
                probability, label = predict(model, normalizer, fv)
                passed_clf = label == "candidate"
                out.n_classifier_passed += passed_clf
                is_candidate = passed_clf and (passed_rules or config.classifier_on_all)

        if is_candidate:
            display = crop(fov, det.centroid_xy, config.display_px)
            out.candidates.append(Candidate(
                cand_id=f"{slide.slide_id}_r{r}c{c}_{i:04d}",
                fov=(r, c),
                detection_index=i,
                centroid_xy=det.centroid_xy,
                radius_px=det.radius_px,
                probability=probability,
                rule_pass=bool(passed_rules),
                label=label,
                mfi=_mfi_block(fv),
                features=fv,
                display_planes=display.planes,
                nuc_mask=nuc.mask,
                cell_mask=cell_mask,
                mask_offset_xy=(thumb.x0, thumb.y0),
                quality_flags=flags,
            ))
    return out


_fork_state = None  # (slide, config, model, normalizer, ck_cutoff) while pooled


def _safe_process_fov(state, key):
    slide, config, model, normalizer, ck_cutoff = state
    try:
        return _process_fov(slide, key, config, model, normalizer, ck_cutoff)
    except BriaError as exc:
        bad = _FovOutcome(key=key)
        bad.failures.append(f"FOV r{key[0]}c{key[1]} failed: {exc}")
        return bad


def _forked_fov(key):
    # Runs in a forked child: the state was inherited at fork time.
    return _safe_process_fov(_fork_state, key)


def run_slide(slide_or_path, config: PipelineConfig | None = None,
              model: SVMModel | None = None,
              normalizer: Normalizer | None = None) -> SlideResult:
    """Run the full per-slide funnel.

    Per-FOV failures are isolated and recorded in the QC report; only
    total I/O failure aborts the run. With ``rules_only`` (or no model)
    the candidate set is exactly the rule-passing cells.
    """
    config = config or PipelineConfig()
    timings = {}
    t0 = time.perf_counter()
    slide = slide_or_path if isinstance(slide_or_path, Slide) else load_slide(slide_or_path)
    if model is None and config.model_path and not config.rules_only:
        model, normalizer = load_model(config.model_path)
    timings["load_s"] = time.perf_counter() - t0

    keys = sorted(slide.meta.grid_keys())
    # CPU-bound stages get real parallelism from forked worker processes;
    # threads on these workloads only add GIL churn. Results are merged
    # deterministically, so the worker count never changes output bytes.
    n_workers = max(1, min(config.workers, os.cpu_count() or 1))

    t0 = time.perf_counter()
    if config.ck_cutoff is not None:
        ck_cutoff = float(config.ck_cutoff)
    else:
        stats = [_background_ck_stats(slide.fov(*key).planes) for key in keys]
        total = sum(s[0] for s in stats)
        total_sq = sum(s[1] for s in stats)
        n = sum(s[2] for s in stats)
        mean = total / n
        std = float(np.sqrt(max(total_sq / n - mean * mean, 0.0)))
        ck_cutoff = mean + 2.0 * std
    timings["ck_cutoff_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    failures = []
    outcomes = {}

    state = (slide, config, model, normalizer, ck_cutoff)
    if n_workers > 1 and hasattr(os, "fork"):
        global _fork_state
        _fork_state = state
        try:
            ctx = multiprocessing.get_context("fork")
            with ctx.Pool(processes=n_workers) as pool:
                outcome_list = pool.map(_forked_fov, keys)
        finally:
            _fork_state = None
    else:
        outcome_list = [_safe_process_fov(state, key) for key in keys]
    for outcome in outcome_list:
        outcomes[outcome.key] = outcome
    timings["process_s"] = time.perf_counter() - t0

    counts = {"detected": 0, "segmented": 0, "rule_passed": 0,
              "classifier_evaluated": 0, "classifier_passed": 0, "candidates": 0}
    candidates = []
    stats_acc = {ch: [None, None, 0.0, 0] for ch in CHANNELS}
    for key in keys:  # deterministic reducer: grid order, then detection index
        out = outcomes[key]
        failures.extend(out.failures)
        counts["detected"] += out.n_detected
        counts["segmented"] += out.n_segmented
        counts["rule_passed"] += out.n_rule_passed
        counts["classifier_evaluated"] += out.n_classifier_evaluated
        counts["classifier_passed"] += out.n_classifier_passed
        candidates.extend(sorted(out.candidates, key=lambda cd: cd.detection_index))
        for ch, (lo, hi, total, size) in out.channel_stats.items():
            acc = stats_acc[ch]
            acc[0] = lo if acc[0] is None else min(acc[0], lo)
            acc[1] = hi if acc[1] is None else max(acc[1], hi)
            acc[2] += total
            acc[3] += size
    counts["candidates"] = len(candidates)

    qc = QCReport(
        slide_id=slide.slide_id,
        fovs_expected=len(keys),
        fovs_found=len(keys) - sum(1 for k in keys if outcomes[k].failures
                                   and not outcomes[k].n_detected),
        channel_stats={ch: {"min": acc[0], "max": acc[1],
                            "mean": acc[2] / acc[3] if acc[3] else None}
                       for ch, acc in stats_acc.items()},
        failures=failures,
    )
    return SlideResult(slide_id=slide.slide_id, config=config, counts=counts,
                       candidates=candidates, qc=qc, timings=timings,
                       ck_cutoff=ck_cutoff)


# --- export ---

def _to_u8(plane: np.ndarray) -> np.ndarray:
    hi = max(int(plane.max()), 1)
    return (plane.astype(np.float64) / hi * 255.0).round().astype(np.uint8)


def _composite_rgb(planes: dict) -> np.ndarray:
    return np.stack([_to_u8(planes[ch]) for ch in COMPOSITE_RGB], axis=-1)


def _mask_contour(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage as ndi
    return mask & ~ndi.binary_erosion(mask, structure=np.ones((3, 3), dtype=bool))


def _overlay_rgb(display_planes: dict, nuc_mask: np.ndarray,
                 mask_offset_xy: tuple, display_px: int, thumb_px: int) -> np.ndarray:
    rgb = _composite_rgb(display_planes)
    contour = _mask_contour(nuc_mask)
    # masks live in the analysis-thumb frame centered like the display crop
    shift = display_px // 2 - thumb_px // 2
    ys, xs = np.nonzero(contour)
    ys, xs = ys + shift, xs + shift
    keep = (ys >= 0) & (ys < display_px) & (xs >= 0) & (xs < display_px)
    rgb[ys[keep], xs[keep]] = (255, 255, 0)
    return rgb


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def export(result: SlideResult, out_dir) -> dict:
    """Write candidates.json, per-candidate PNGs, masks and a manifest.

    Deterministic: re-exporting the same result reproduces identical
    bytes (and therefore identical manifest hashes).
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create export directory: {exc}") from exc

    config = result.config
    entries = []
    for cand in result.candidates:
        cid = cand.cand_id
        images = {}
        for ch in CHANNELS:
            fname = f"images/{cid}_{ch}.png"
            _write_png(out / fname, cand.display_planes[ch])
            images[ch] = fname
        fname = f"images/{cid}_composite.png"
        _write_png(out / fname, _composite_rgb(cand.display_planes))
        images["composite"] = fname
        fname = f"images/{cid}_overlay.png"
        _write_png(out / fname, _overlay_rgb(cand.display_planes, cand.nuc_mask,
                                             cand.mask_offset_xy,
                                             config.display_px, config.thumbnail_px))
        images["overlay"] = fname

        masks = {}
        for name, mask in (("nucleus", cand.nuc_mask), ("cell", cand.cell_mask)):
            fname = f"masks/{cid}_{name}.png"
            _write_png(out / fname, (mask.astype(np.uint8)) * 255)
            masks[name] = {"file": fname, "offset": list(cand.mask_offset_xy),
                           "area_px": int(mask.sum())}

        entries.append({
            "id": cid,
            "fov": list(cand.fov),
            "centroid": [cand.centroid_xy[0], cand.centroid_xy[1]],
            "radius_px": cand.radius_px,
            "probability": cand.probability,
            "rule_pass": cand.rule_pass,
            "label": cand.label,
            "mfi": cand.mfi,
            "features_ref": f"features.json#{cid}",
            "images": images,
            "masks": masks,
            "quality_flags": list(cand.quality_flags),
        })

    docs = {
        "candidates.json": {
            "slide_id": result.slide_id,
            "config_hash": result.config_hash,
            "candidates": entries,
        },
        "features.json": {
            "schema_hash": schema_hash(),
            "names": list(FEATURE_NAMES),
            "vectors": {c.cand_id: c.features.values.tolist()
                        for c in result.candidates},
        },
        "qc.json": result.qc.to_json(),
        "funnel.json": funnel_report(result, include_timings=False),
        "result.json": {
            "slide_id": result.slide_id,
            "config": {k: v for k, v in config.to_json().items() if k != "workers"},
            "config_hash": result.config_hash,
            "counts": result.counts,
            "ck_cutoff": result.ck_cutoff,
        },
    }
    for name, doc in docs.items():
        with open(out / name, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    files = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {"slide_id": result.slide_id,
                "files": {f: _sha256(out / f) for f in files}}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def save_result(result: SlideResult, path) -> None:
    """Persist a run so `export` can be re-run without reprocessing."""
    path = Path(path)
    doc = {
        "slide_id": result.slide_id,
        "config": result.config.to_json(),
        "counts": result.counts,
        "qc": result.qc.to_json(),
        "timings": result.timings,
        "ck_cutoff": result.ck_cutoff,
        "candidates": [],
    }
    arrays = {}
    for k, cand in enumerate(result.candidates):
        doc["candidates"].append({
            "cand_id": cand.cand_id, "fov": list(cand.fov),
            "detection_index": cand.detection_index,
            "centroid_xy": list(cand.centroid_xy), "radius_px": cand.radius_px,
            "probability": cand.probability, "rule_pass": cand.rule_pass,
            "label": cand.label, "mfi": cand.mfi,
            "mask_offset_xy": list(cand.mask_offset_xy),
            "quality_flags": list(cand.quality_flags),
        })
        arrays[f"feat_{k}"] = cand.features.values
        arrays[f"nuc_{k}"] = cand.nuc_mask
        arrays[f"cell_{k}"] = cand.cell_mask
        for ch in CHANNELS:
            arrays[f"disp_{k}_{ch}"] = cand.display_planes[ch]
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    np.savez_compressed(path.with_suffix(".npz"), **arrays)


def load_result(path) -> SlideResult:
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        doc = json.load(fh)
    arrays = np.load(path.with_suffix(".npz"))
    candidates = []
    for k, entry in enumerate(doc["candidates"]):
        candidates.append(Candidate(
            cand_id=entry["cand_id"], fov=tuple(entry["fov"]),
            detection_index=entry["detection_index"],
            centroid_xy=tuple(entry["centroid_xy"]), radius_px=entry["radius_px"],
            probability=entry["probability"], rule_pass=entry["rule_pass"],
            label=entry["label"], mfi=entry["mfi"],
            features=FeatureVector(values=arrays[f"feat_{k}"],
                                   quality_flags=entry["quality_flags"]),
            display_planes={ch: arrays[f"disp_{k}_{ch}"] for ch in CHANNELS},
            nuc_mask=arrays[f"nuc_{k}"], cell_mask=arrays[f"cell_{k}"],
            mask_offset_xy=tuple(entry["mask_offset_xy"]),
            quality_flags=entry["quality_flags"],
        ))
    qc = QCReport(slide_id=doc["qc"]["slide_id"],
                  fovs_expected=doc["qc"]["fovs_expected"],
                  fovs_found=doc["qc"]["fovs_found"],
                  channel_stats=doc["qc"]["channel_stats"],
                  failures=doc["qc"]["failures"])
    return SlideResult(slide_id=doc["slide_id"],
                       config=PipelineConfig.from_json(doc["config"]),
                       counts=doc["counts"], candidates=candidates, qc=qc,
                       timings=doc["timings"], ck_cutoff=doc["ck_cutoff"])


def funnel_report(result: SlideResult, include_timings: bool = True) -> dict:
    """Stage counts and reduction ratios for one slide run.

    Timings are for console reporting only; the exported copy omits
    them so export bytes stay run-independent.
    """
    c = result.counts
    if not (c["detected"] >= c["segmented"] >= c["rule_passed"]):
        raise AssertionError(f"funnel counts not monotone: {c}")
    if c["classifier_passed"] > max(c["classifier_evaluated"], c["rule_passed"]):
        raise AssertionError(f"classifier counts not monotone: {c}")

    def ratio(a, b):
        return round(a / b, 6) if b else "n/a"

    report = {
        "slide_id": result.slide_id,
        "counts": dict(c),
        "reduction": {
            "rule_passed_over_detected": ratio(c["rule_passed"], c["detected"]),
            "candidates_over_detected": ratio(c["candidates"], c["detected"]),
            "fold_reduction": ratio(c["detected"], c["candidates"]),
        },
    }
    if include_timings:
        report["timings_s"] = {k: round(v, 3) for k, v in result.timings.items()}
    return report
