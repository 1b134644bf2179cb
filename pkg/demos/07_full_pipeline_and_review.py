"""End-to-end funnel on one slide plus the review workflow.

Runs detect -> segment -> featurize -> rules -> classify, exports the
candidates (JSON + PNG crops + masks + manifest), then reviews them
through the in-process store exactly as the HTTP API would.
"""

from pathlib import Path

import numpy as np

from bria.pipeline import PipelineConfig, export, funnel_report, run_slide
from bria.review_api import ReviewStore
from bria.synth import SlideSpec, generate_slide

spec = SlideSpec(slide_id="demo_run", grid_rows=2, grid_cols=2,
                 fov_width_px=512, fov_height_px=512,
                 counts={"ctc": 5, "wbc": 180, "artefact": 5}, seed=1234)
slide, truth = generate_slide(spec)

# rules-only mode: no trained model needed for the demo
result = run_slide(slide, PipelineConfig(workers=2))
report = funnel_report(result)
print("funnel:", report["counts"])
print("reduction:", report["reduction"])

out = Path("demo_output/export")
manifest = export(result, out)
print(f"exported {len(manifest['files'])} files to {out}")

# review the candidates: verdicts are durably logged and replayable
store = ReviewStore(out, log_dir=Path("demo_output/verdicts"))
page = store.list_candidates("demo_run", page=1, page_size=10)
print(f"reviewing {page['total']} candidates")
for k, cand in enumerate(page["candidates"]):
    decision = "ctc" if k < truth.total("ctc") else "artefact"
    store.post_verdict(cand["id"], decision, reviewer="demo_reviewer")

summary = store.report("demo_run")
print("confirmed:", summary["confirmed"])
print("progress:", {r: f"{v['progress']:.0%}"
                    for r, v in summary["per_reviewer"].items()})

# a fresh store instance replays the log and sees identical state
replayed = ReviewStore(out, log_dir=Path("demo_output/verdicts"))
print("replay reproduces the report:", replayed.report("demo_run") == summary)
