import json

import pytest

from bria.cli import main
from bria.detect import Detection


@pytest.fixture(scope="module")
def slide_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_slide")
    code = main(["synth", "--out", str(out), "--slide-id", "cli",
                 "--grid-rows", "1", "--grid-cols", "2", "--fov-px", "460",
                 "--ctc", "12", "--wbc", "70", "--artefact", "4",
                 "--seed", "5"])
    assert code == 0
    return out


def test_synth_writes_slide_and_truth(slide_dir):
    assert (slide_dir / "slide.json").exists()
    assert (slide_dir / "truth" / "ground_truth.json").exists()
    assert (slide_dir / "r0_c1_ck.png").exists()


def test_detect_emits_detections_per_fov(slide_dir, tmp_path):
    assert main(["detect", "--slide", str(slide_dir), "--out", str(tmp_path)]) == 0
    files = sorted(tmp_path.glob("detections_r*_c*.json"))
    assert len(files) == 2
    with open(files[0]) as fh:
        doc = json.load(fh)
    assert doc["fov"] == [0, 0]
    det = Detection.from_json(doc["detections"][0])
    assert det.radius_px > 0 and det.score > 0


def test_segment_emits_probmaps_and_labels(slide_dir, tmp_path):
    assert main(["segment", "--slide", str(slide_dir), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "probmaps_r0_c0.json").exists()
    assert (tmp_path / "probmaps_r0_c0_cell.png").exists()
    assert (tmp_path / "labels_r0_c0.png").exists()


@pytest.fixture(scope="module")
def features_file(slide_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_feat") / "features.json"
    code = main(["features", "--slide", str(slide_dir),
                 "--truth", str(slide_dir / "truth"), "--out", str(out)])
    assert code == 0
    return out


def test_features_file_schema(features_file):
    with open(features_file) as fh:
        doc = json.load(fh)
    assert len(doc["names"]) == 122
    assert doc["vectors"]
    some_vector = next(iter(doc["vectors"].values()))
    assert len(some_vector) == 122
    assert doc["labels"]


def test_train_eval_importance_round_trip(features_file, tmp_path, capsys):
    model_path = tmp_path / "model.json"
    assert main(["train", "--features", str(features_file),
                 "--out", str(model_path), "--folds", "4", "--seed", "0"]) == 0
    assert model_path.exists()
    with open(model_path) as fh:
        doc = json.load(fh)
    assert set(doc) == {"model", "normalizer"}
    assert doc["model"]["threshold"] == 0.3

    capsys.readouterr()  # discard the train log line
    assert main(["eval", "--model", str(model_path),
                 "--features", str(features_file)]) == 0
    eval_out = capsys.readouterr().out
    metrics = json.loads(eval_out[eval_out.index("{"):])
    assert set(metrics) >= {"tp", "tn", "fp", "fn", "sensitivity", "specificity"}

    assert main(["importance", "--model", str(model_path),
                 "--features", str(features_file), "--top", "3",
                 "--repeats", "2"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 3


def test_run_and_reexport(slide_dir, tmp_path):
    run_dir = tmp_path / "run"
    assert main(["run", "--slide", str(slide_dir), "--out", str(run_dir),
                 "--rules-only"]) == 0
    assert (run_dir / "export" / "candidates.json").exists()
    assert (run_dir / "result_bundle.json").exists()

    re_dir = tmp_path / "re"
    assert main(["export", "--result", str(run_dir / "result_bundle"),
                 "--out", str(re_dir)]) == 0
    with open(run_dir / "export" / "manifest.json") as fh:
        original = json.load(fh)
    with open(re_dir / "manifest.json") as fh:
        again = json.load(fh)
    assert original["files"] == again["files"]
