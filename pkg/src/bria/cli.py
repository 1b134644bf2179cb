"""Command-line entry points for the slide pipeline.

Subcommands: synth, detect, segment, features, train, eval, importance,
run, export, serve. Shared flags: --config, --workers, --seed, --model,
--rules-only.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cellseg, pipeline, review_api, synth
from .classify import (
    RuleSet,
    evaluate,
    load_model,
    permutation_importance,
    save_model,
    train_model,
)
from .detect import detect_cells
from .features import FEATURE_NAMES, schema_hash
from .slide_io import load_slide, validate_slide, write_plane


def _load_config(args) -> pipeline.PipelineConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = pipeline.PipelineConfig.from_json(json.load(fh))
    else:
        config = pipeline.PipelineConfig()
    if getattr(args, "workers", None) is not None:
        config.workers = args.workers
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "model", None):
        config.model_path = args.model
    if getattr(args, "rules_only", False):
        config.rules_only = True
    return config


def _cmd_synth(args) -> int:
    spec = synth.SlideSpec(
        slide_id=args.slide_id,
        grid_rows=args.grid_rows, grid_cols=args.grid_cols,
        fov_width_px=args.fov_px, fov_height_px=args.fov_px,
        counts={"ctc": args.ctc, "wbc": args.wbc, "artefact": args.artefact},
        seed=args.seed if args.seed is not None else 0,
    )
    slide, truth = synth.generate_slide(spec)
    out = Path(args.out)
    slide.save(out)
    truth.save(out / "truth")
    qc = validate_slide(load_slide(out))
    print(f"wrote {spec.slide_id}: {truth.total()} cells "
          f"({truth.total('ctc')} ctc) to {out}; QC passed: {qc.passed}")
    return 0


def _cmd_detect(args) -> int:
    config = _load_config(args)
    slide = load_slide(args.slide)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    total = 0
    for r, c in sorted(slide.meta.grid_keys()):
        fov = slide.fov(r, c)
        detections = detect_cells(fov.planes["dapi"], config.detect_params())
        total += len(detections)
        with open(out / f"detections_r{r}_c{c}.json", "w") as fh:
            json.dump({"fov": [r, c],
                       "detections": [d.to_json() for d in detections]},
                      fh, indent=2, sort_keys=True)
    print(f"{total} detections across {slide.meta.grid_rows}x"
          f"{slide.meta.grid_cols} FOVs -> {out}")
    return 0


def _cmd_segment(args) -> int:
    config = _load_config(args)
    slide = load_slide(args.slide)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r, c in sorted(slide.meta.grid_keys()):
        fov = slide.fov(r, c)
        detections = detect_cells(fov.planes["dapi"], config.detect_params())
        maps = cellseg.classical_probmaps(fov)
        cellseg.save_probmaps(maps, out, stem=f"probmaps_r{r}_c{c}")
        labels, _ = cellseg.instance_segment(maps, detections)
        write_plane(out / f"labels_r{r}_c{c}.png", labels.astype(np.uint16))
    print(f"probability maps and label planes -> {out}")
    return 0


def _cmd_features(args) -> int:
    config = _load_config(args)
    config.rules_only = True  # features for every segmented cell
    slide = load_slide(args.slide)
    result = pipeline.run_slide(slide, _all_cells_config(config))
    doc = {
        "schema_hash": schema_hash(),
        "names": list(FEATURE_NAMES),
        "vectors": {cand.cand_id: cand.features.values.tolist()
                    for cand in result.candidates},
    }
    if args.truth:
        truth = synth.GroundTruth.load(args.truth)
        doc["labels"] = _match_labels(result, truth)
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    print(f"{len(doc['vectors'])} feature vectors -> {args.out}")
    return 0


def _all_cells_config(config: pipeline.PipelineConfig) -> pipeline.PipelineConfig:
    """Make every segmented cell a candidate (empty rule set, no model)."""
    clone = pipeline.PipelineConfig.from_json(config.to_json())
    clone.rules = RuleSet(rules=[])
    clone.rules_only = True
    clone.model_path = None
    return clone


def _match_labels(result: pipeline.SlideResult, truth: synth.GroundTruth,
                  max_dist: float = 6.0) -> dict:
    labels = {}
    for cand in result.candidates:
        fgt = truth.per_fov.get(cand.fov)
        if fgt is None or not fgt.cells:
            continue
        centers = fgt.centers()
        d = np.hypot(centers[:, 0] - cand.centroid_xy[0],
                     centers[:, 1] - cand.centroid_xy[1])
        best = int(np.argmin(d))
        if d[best] <= max_dist:
            labels[cand.cand_id] = fgt.cells[best].cell_class
    return labels


def _read_matrix(path) -> tuple:
    with open(path) as fh:
        doc = json.load(fh)
    ids = sorted(doc["vectors"])
    X = np.asarray([doc["vectors"][i] for i in ids], dtype=np.float64)
    y = None
    if "labels" in doc:
        kept, yy = [], []
        for row, cand_id in enumerate(ids):
            lab = doc["labels"].get(cand_id)
            if lab is None:
                continue
            kept.append(row)
            yy.append(1.0 if lab == "ctc" else -1.0)
        X = X[kept]
        ids = [ids[r] for r in kept]
        y = np.asarray(yy)
    return ids, X, y


def _cmd_train(args) -> int:
    _, X, y = _read_matrix(args.features)
    if y is None:
        print("error: feature file has no labels; run `features --truth`",
              file=sys.stderr)
        return 2
    model, normalizer, result = train_model(X, y, k=args.folds,
                                            seed=args.seed or 0,
                                            threshold=args.threshold)
    save_model(model, normalizer, args.out)
    print(f"best: {result.best_params} cv-accuracy {result.best_accuracy:.4f} "
          f"-> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, normalizer = load_model(args.model)
    _, X, y = _read_matrix(args.features)
    if y is None:
        print("error: feature file has no labels", file=sys.stderr)
        return 2
    metrics = evaluate(model, normalizer, X, y)
    print(json.dumps(metrics, indent=2))
    return 0


def _cmd_importance(args) -> int:
    model, normalizer = load_model(args.model)
    _, X, y = _read_matrix(args.features)
    if y is None:
        print("error: feature file has no labels", file=sys.stderr)
        return 2
    ranking = permutation_importance(model, normalizer, X, y,
                                     n_repeats=args.repeats, seed=args.seed or 0)
    for feat, drop in ranking[:args.top]:
        print(f"{FEATURE_NAMES[feat]:32s} {drop:+.4f}")
    return 0


def _cmd_run(args) -> int:
    config = _load_config(args)
    result = pipeline.run_slide(args.slide, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_result(result, out / "result_bundle")
    pipeline.export(result, out / "export")
    print(json.dumps(pipeline.funnel_report(result), indent=2))
    return 0


def _cmd_export(args) -> int:
    result = pipeline.load_result(Path(args.result))
    manifest = pipeline.export(result, args.out)
    print(f"{len(manifest['files'])} files -> {args.out}")
    return 0


def _cmd_serve(args) -> int:
    review_api.serve(args.exports, log_dir=args.log_dir, host=args.host,
                     port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bria",
                                     description="rare-cell slide pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic slide with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id", default="synthetic")
    p.add_argument("--grid-rows", type=int, default=2)
    p.add_argument("--grid-cols", type=int, default=2)
    p.add_argument("--fov-px", type=int, default=512)
    p.add_argument("--ctc", type=int, default=5)
    p.add_argument("--wbc", type=int, default=150)
    p.add_argument("--artefact", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    for name, fn, help_text in (
        ("detect", _cmd_detect, "emit detections.json per FOV"),
        ("segment", _cmd_segment, "emit probability maps and label planes"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--slide", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("features", help="extract feature vectors for every cell")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth dir to attach class labels")
    p.add_argument("--config")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("train", help="grid-search, calibrate and save a model")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="confusion metrics of a model on features")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("importance", help="permutation importance ranking")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_importance)

    p = sub.add_parser("run", help="full funnel on one slide, with export")
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--model")
    p.add_argument("--rules-only", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("export", help="re-export a saved run bundle")
    p.add_argument("--result", required=True, help="bundle path stem")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("serve", help="serve exports for review")
    p.add_argument("--exports", required=True)
    p.add_argument("--log-dir")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8400)
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
