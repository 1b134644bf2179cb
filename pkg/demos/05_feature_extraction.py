"""Extract the 122-dimensional descriptor for detected cells.

Blocks: morphology of the nucleus and cell masks, intensity statistics
per object and channel (MFIs, quartiles, CK+ ratio, correlations,
ranked-weighted co-localization), and texture of the tumor-marker
channel (Gabor bank, Laws bank, LBP channel agreement).
"""

import numpy as np

from bria.detect import DetectParams, crop_detections, detect_cells
from bria.features import FEATURE_NAMES, FeatureConfig, extract
from bria.nucseg import segment_nucleus
from bria.synth import SlideSpec, generate_slide

spec = SlideSpec(grid_rows=1, grid_cols=1, fov_width_px=420, fov_height_px=420,
                 counts={"ctc": 3, "wbc": 20}, seed=8)
slide, truth = generate_slide(spec)
fov = slide.fov(0, 0)

detections = detect_cells(fov.planes["dapi"], DetectParams())
thumbs = crop_detections(fov, detections, size=24)

config = FeatureConfig(ck_cutoff=300.0)
det, thumb = detections[0], thumbs[0]
center = (det.centroid_xy[0] - thumb.x0, det.centroid_xy[1] - thumb.y0)
nuc = segment_nucleus(thumb.planes["dapi"], center, det.radius_px)

# a quick stand-in cell mask: nucleus dilated to the cell scale
from scipy import ndimage
cell_mask = ndimage.binary_dilation(nuc.mask, iterations=3)

vector = extract(thumb.planes, nuc.mask, cell_mask, config)
print(f"{len(vector.values)} features, all finite:",
      bool(np.isfinite(vector.values).all()))

for name in ("Nuc_Size", "Nuc_Roundness", "Nuc_MFI_dapi", "Nuc_MFI_ck",
             "Nuc_MFI_cd45", "Nuc_IQR_ck", "Cell_CKplus_ratio",
             "Cell_Coloc_ck_dapi", "MEAN_ck", "STD_ck"):
    print(f"  {name:22s} {vector[name]:.3f}")

# class contrast: a tumor cell carries more tumor-marker signal than a
# leukocyte, which carries the exclusion marker instead
by_class = {}
fgt = truth.per_fov[(0, 0)]
centers = fgt.centers()
for det, thumb in zip(detections, thumbs):
    center = (det.centroid_xy[0] - thumb.x0, det.centroid_xy[1] - thumb.y0)
    nuc = segment_nucleus(thumb.planes["dapi"], center, det.radius_px)
    cell_mask = ndimage.binary_dilation(nuc.mask, iterations=3)
    fv = extract(thumb.planes, nuc.mask, cell_mask, config)
    idx = int(np.argmin(np.hypot(centers[:, 0] - det.centroid_xy[0],
                                 centers[:, 1] - det.centroid_xy[1])))
    by_class.setdefault(fgt.cells[idx].cell_class, []).append(fv["Nuc_MFI_ck"])

for cls, vals in sorted(by_class.items()):
    print(f"nuclear tumor-marker MFI for {cls}: mean {np.mean(vals):.0f}")
print("first five schema names:", FEATURE_NAMES[:5])
