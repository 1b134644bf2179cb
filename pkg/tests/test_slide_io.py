import json

import numpy as np
import pytest

from bria.errors import CenterOutsideFov, ChannelMissing, DimensionMismatch, MissingMetadata
from bria.slide_io import (
    CHANNELS,
    FieldOfView,
    SlideMeta,
    crop,
    load_slide,
    plane_filename,
    read_plane,
    validate_slide,
    write_plane,
)
from bria.synth import SlideSpec, generate_slide


def test_meta_requires_canonical_channels():
    with pytest.raises(ValueError):
        SlideMeta(slide_id="s", grid_rows=1, grid_cols=1, fov_width_px=10,
                  fov_height_px=10, channels=("dapi", "ck"))
    with pytest.raises(ValueError):
        SlideMeta(slide_id="s", grid_rows=0, grid_cols=1, fov_width_px=10,
                  fov_height_px=10)


def test_save_load_round_trip_pixel_identical(small_slide, tmp_path):
    _, slide, _ = small_slide
    slide.save(tmp_path)
    reloaded = load_slide(tmp_path)
    assert reloaded.meta == slide.meta
    for r, c in slide.meta.grid_keys():
        a, b = slide.fov(r, c), reloaded.fov(r, c)
        for ch in CHANNELS:
            assert np.array_equal(a.planes[ch], b.planes[ch])


def test_load_without_metadata_raises(tmp_path):
    with pytest.raises(MissingMetadata):
        load_slide(tmp_path)


def test_load_detects_dimension_mismatch(tmp_path):
    spec = SlideSpec(grid_rows=1, grid_cols=1, fov_width_px=64, fov_height_px=64,
                     counts={"ctc": 0, "wbc": 0}, seed=0)
    slide, _ = generate_slide(spec)
    slide.save(tmp_path)
    # shrink one plane on disk under unchanged metadata
    bad = read_plane(tmp_path / plane_filename(0, 0, "ck"))[:32, :]
    write_plane(tmp_path / plane_filename(0, 0, "ck"), bad)
    with pytest.raises(DimensionMismatch):
        load_slide(tmp_path)


def test_load_detects_missing_channel(tmp_path):
    spec = SlideSpec(grid_rows=1, grid_cols=2, fov_width_px=64, fov_height_px=64,
                     counts={"ctc": 0, "wbc": 0}, seed=0)
    slide, _ = generate_slide(spec)
    slide.save(tmp_path)
    (tmp_path / plane_filename(0, 1, "cd45")).unlink()
    with pytest.raises(ChannelMissing):
        load_slide(tmp_path)


def test_qc_passes_on_generated_slide(small_slide, tmp_path):
    _, slide, _ = small_slide
    slide.save(tmp_path)
    report = validate_slide(load_slide(tmp_path))
    assert report.passed
    assert report.failures == []
    assert report.fovs_found == report.fovs_expected == 4
    for ch in CHANNELS:
        stats = report.channel_stats[ch]
        assert stats["min"] >= 0 and stats["max"] <= 65535
        assert stats["min"] <= stats["mean"] <= stats["max"]


def test_qc_reports_single_missing_fov(small_slide, tmp_path):
    _, slide, _ = small_slide
    slide.save(tmp_path)
    for ch in CHANNELS:
        (tmp_path / plane_filename(1, 1, ch)).unlink()
    loaded = type(slide)(slide.meta, root=tmp_path)  # bypass load-time check
    report = validate_slide(loaded)
    missing = [f for f in report.failures if f.startswith("missing plane")]
    assert len(missing) == 1
    assert "r1c1" in missing[0]


def test_qc_reports_all_zero_plane(small_slide, tmp_path):
    _, slide, _ = small_slide
    slide.save(tmp_path)
    zero = np.zeros((384, 384), dtype=np.uint16)
    write_plane(tmp_path / plane_filename(0, 0, "dapi"), zero)
    report = validate_slide(load_slide(tmp_path))
    assert any("all-zero plane" in f and "dapi" in f for f in report.failures)


def _toy_fov():
    rng = np.random.default_rng(0)
    planes = {ch: rng.integers(1, 5000, size=(48, 64)).astype(np.uint16)
              for ch in CHANNELS}
    return FieldOfView(row=0, col=0, planes=planes)


def test_crop_interior_matches_source():
    fov = _toy_fov()
    thumb = crop(fov, (32, 24), 24)
    assert thumb.stack().shape == (24, 24, 3)
    for ch in CHANNELS:
        assert np.array_equal(thumb.planes[ch], fov.planes[ch][12:36, 20:44])


def test_crop_corner_zero_pads_top_left_quadrant():
    fov = _toy_fov()
    thumb = crop(fov, (0, 0), 24)
    for ch in CHANNELS:
        assert not thumb.planes[ch][:12, :12].any()
        assert np.array_equal(thumb.planes[ch][12:, 12:], fov.planes[ch][:12, :12])


def test_crop_center_outside_raises():
    fov = _toy_fov()
    with pytest.raises(CenterOutsideFov):
        crop(fov, (64, 10), 24)
    with pytest.raises(CenterOutsideFov):
        crop(fov, (-1, 10), 24)


def test_crop_paste_back_recovers_source():
    fov = _toy_fov()
    thumb = crop(fov, (30, 25), 16)
    for ch in CHANNELS:
        recovered = fov.planes[ch][thumb.y0:thumb.y0 + 16, thumb.x0:thumb.x0 + 16]
        assert np.array_equal(thumb.planes[ch], recovered)


def test_crop_translation_consistency():
    fov = _toy_fov()
    a = crop(fov, (30, 24), 12)
    b = crop(fov, (33, 26), 12)  # shifted by (3, 2)
    # overlapping region must agree: a[p + d] == b[p]
    for ch in CHANNELS:
        assert np.array_equal(a.planes[ch][2:, 3:], b.planes[ch][:-2, :-3])


def test_metadata_json_round_trip(small_slide):
    _, slide, _ = small_slide
    doc = json.loads(json.dumps(slide.meta.to_json()))
    assert SlideMeta.from_json(doc) == slide.meta
