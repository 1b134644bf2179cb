import numpy as np
import pytest

from bria.features import (
    CHANNEL_PAIRS,
    FEATURE_NAMES,
    FeatureConfig,
    FeatureVector,
    MaskedObject,
    extract,
    extract_batch,
    gabor_features,
    gabor_kernel,
    intensity_features,
    laws_features,
    lbp_codes,
    lbp_features,
    morphology_features,
    rwc,
    schema_hash,
)
from bria.slide_io import CHANNELS
from bria.synth import _blob_profile


def _disk_mask(size, center, radius):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(xx - center[0], yy - center[1]) <= radius


def _cell_planes(seed=0, size=24, nuc_r=6.0, cell_r=9.0,
                 peaks=(3000.0, 2500.0, 150.0)):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    d = np.hypot(xx - size // 2, yy - size // 2)
    planes = {}
    for ch, peak, r in zip(CHANNELS, peaks, (nuc_r, cell_r, cell_r)):
        img = 100.0 + peak * _blob_profile(d, r)
        img = rng.poisson(img) + rng.normal(0, 3.0, img.shape)
        planes[ch] = np.clip(np.rint(img), 0, 65535).astype(np.uint16)
    return planes, _disk_mask(size, (size // 2, size // 2), nuc_r + 1), \
        _disk_mask(size, (size // 2, size // 2), cell_r + 1)


# --- schema ---

def test_feature_names_fixed_and_unique():
    assert len(FEATURE_NAMES) == 122
    assert len(set(FEATURE_NAMES)) == 122
    for expected in ("Nuc_IQR_ck", "STD_ck", "Cell_Coloc_ck_dapi", "Nuc_MFI_cd45"):
        assert expected in FEATURE_NAMES
    assert len(schema_hash()) == 16


# --- morphology ---

def test_disk_roundness_and_elongation_near_one():
    (area, roundness, elongation, hu1), flags = morphology_features(
        _disk_mask(32, (16, 16), 10))
    assert flags == []
    assert 0.95 <= roundness <= 1.05
    assert 0.95 <= elongation <= 1.05
    assert hu1 == pytest.approx(1.0 / (2.0 * np.pi), rel=0.02)


def test_ellipse_elongation_matches_axis_ratio():
    yy, xx = np.mgrid[0:48, 0:48]
    mask = ((xx - 24) / 16.0) ** 2 + ((yy - 24) / 8.0) ** 2 <= 1.0
    (_, _, elongation, _), _ = morphology_features(mask)
    assert elongation == pytest.approx(0.5, abs=0.05)


def test_hu1_rotation_invariant():
    rng = np.random.default_rng(5)
    blob = rng.random((30, 30)) > 0.6
    blob[13:18, 10:22] = True
    (_, _, _, hu1_a), _ = morphology_features(blob)
    (_, _, _, hu1_b), _ = morphology_features(np.rot90(blob))
    assert abs(hu1_a - hu1_b) <= 1e-6


def test_morphology_translation_invariant():
    base = _disk_mask(40, (12, 14), 7)
    shifted = np.roll(np.roll(base, 5, axis=0), 7, axis=1)
    a, _ = morphology_features(base)
    b, _ = morphology_features(shifted)
    assert np.allclose(a, b, atol=1e-9)


def test_single_pixel_mask_flagged():
    mask = np.zeros((9, 9), dtype=bool)
    mask[4, 4] = True
    (area, roundness, elongation, hu1), flags = morphology_features(mask)
    assert (area, roundness, elongation, hu1) == (1.0, 1.0, 1.0, 0.0)
    assert "degenerate_mask" in flags


# --- intensity ---

def brute_force_intensity(nuc_mask, cell_mask, planes, ck_cutoff):
    """Literal per-definition recomputation of all 44 intensity values."""
    def quartiles(vals):
        vals = sorted(vals)
        n = len(vals)

        def q(p):
            pos = (n - 1) * p
            lo, hi = int(np.floor(pos)), int(np.ceil(pos))
            return vals[lo] + (vals[hi] - vals[lo]) * (pos - lo)
        return q(0.25), q(0.5), q(0.75)

    def pearson(a, b):
        am, bm = sum(a) / len(a), sum(b) / len(b)
        va = sum((x - am) ** 2 for x in a)
        vb = sum((x - bm) ** 2 for x in b)
        if va == 0 or vb == 0:
            return 0.0
        cov = sum((x - am) * (y - bm) for x, y in zip(a, b))
        return cov / np.sqrt(va * vb)

    out = []
    objs = [nuc_mask, cell_mask]
    vals = {id(m): {ch: [float(planes[ch][p]) for p in zip(*np.nonzero(m))]
                    for ch in CHANNELS} for m in objs}
    for m in objs:
        for ch in CHANNELS:
            v = vals[id(m)][ch]
            out.append(sum(v) / len(v))
    for m in objs:
        for ch in CHANNELS:
            lqi, mqi, uqi = quartiles(vals[id(m)][ch])
            out += [lqi, mqi, uqi, uqi - lqi]
    for m in objs:
        v = vals[id(m)]["ck"]
        out.append(sum(1 for x in v if x > ck_cutoff) / len(v))
    for m in objs:
        for a, b in CHANNEL_PAIRS:
            out.append(pearson(vals[id(m)][a], vals[id(m)][b]))
    return out


def test_intensity_matches_brute_force():
    rng = np.random.default_rng(77)
    for trial in range(40):
        planes = {ch: rng.integers(0, 4000, size=(8, 8)).astype(np.uint16)
                  for ch in CHANNELS}
        nuc = rng.random((8, 8)) > 0.5
        cell = nuc | (rng.random((8, 8)) > 0.5)
        if nuc.sum() < 2 or cell.sum() < 2:
            continue
        cutoff = float(rng.uniform(100, 3000))
        got, _ = intensity_features(
            MaskedObject(mask=nuc, planes=planes, role="nucleus"),
            MaskedObject(mask=cell, planes=planes, role="cell"),
            planes, cutoff)
        want = brute_force_intensity(nuc, cell, planes, cutoff)
        # blocks: 6 MFI, 24 quartile, 2 CK+, 6 Pearson (RWC and CK stats after)
        assert np.allclose(got[:6], want[:6], atol=1e-9)
        assert np.allclose(got[6:30], want[6:30], atol=1e-9)
        assert np.allclose(got[30:32], want[30:32], atol=1e-9)
        assert np.allclose(got[32:38], want[32:38], atol=1e-9)
        # CK thumbnail stats
        ck = planes["ck"].astype(np.float64)
        assert got[42] == pytest.approx(ck.mean(), abs=1e-9)
        assert got[43] == pytest.approx(ck.std(), abs=1e-9)


def test_constant_channel_quartiles_collapse():
    planes = {ch: np.full((6, 6), 100, dtype=np.uint16) for ch in CHANNELS}
    mask = np.ones((6, 6), dtype=bool)
    got, flags = intensity_features(
        MaskedObject(mask=mask, planes=planes, role="nucleus"),
        MaskedObject(mask=mask, planes=planes, role="cell"),
        planes, 300.0)
    assert got[0] == 100.0  # MFI
    assert got[6:10] == [100.0, 100.0, 100.0, 0.0]  # LQI, MQI, UQI, IQR
    assert "zero_variance_corr" in flags
    assert got[32] == 0.0  # correlation defined as 0 under zero variance


def test_self_correlation_is_one():
    rng = np.random.default_rng(3)
    base = rng.integers(0, 5000, size=(8, 8)).astype(np.uint16)
    planes = {"dapi": base, "ck": base.copy(), "cd45": rng.integers(
        0, 5000, size=(8, 8)).astype(np.uint16)}
    mask = np.ones((8, 8), dtype=bool)
    got, _ = intensity_features(
        MaskedObject(mask=mask, planes=planes, role="nucleus"),
        MaskedObject(mask=mask, planes=planes, role="cell"),
        planes, 300.0)
    assert got[32] == pytest.approx(1.0)  # Nuc dapi-ck correlation


def test_ck_ratio_hand_counted():
    planes = {ch: np.arange(1, 10, dtype=np.uint16).reshape(3, 3)
              for ch in CHANNELS}
    mask = np.ones((3, 3), dtype=bool)
    got, _ = intensity_features(
        MaskedObject(mask=mask, planes=planes, role="nucleus"),
        MaskedObject(mask=mask, planes=planes, role="cell"),
        planes, 5.0)
    assert got[0] == pytest.approx(5.0)          # MFI of {1..9}
    assert got[30] == pytest.approx(4.0 / 9.0)   # CK+ ratio, cutoff 5 strict


# --- rwc ---

def test_rwc_identical_channels_full_mass():
    rng = np.random.default_rng(0)
    a = rng.integers(1, 1000, 200).astype(np.float64)
    assert rwc(a, a, thresholds=(-1.0, -1.0)) == pytest.approx(1.0)


def test_rwc_anti_ranked_low():
    rng = np.random.default_rng(1)
    a = rng.permutation(np.arange(1.0, 201.0))
    b = a.max() + a.min() - a
    assert rwc(a, b) <= 0.5


def test_rwc_disjoint_supra_threshold_sets_zero():
    a = np.array([10.0] * 50 + [1000.0] * 50)
    b = np.array([1000.0] * 50 + [10.0] * 50)
    assert rwc(a, b) == 0.0


def test_rwc_bounded_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n = int(rng.integers(4, 64))
        a = rng.integers(0, 65535, n).astype(np.float64)
        b = rng.integers(0, 65535, n).astype(np.float64)
        assert 0.0 <= rwc(a, b) <= 1.0


# --- gabor ---

def test_gabor_constant_input():
    const = np.full((24, 24), 700.0)
    out = gabor_features(const)
    assert len(out) == 32
    kernels = [gabor_kernel(t, f, s) for t in (0, 45, 90, 135)
               for f in (0.1, 0.4) for s in (1, 3)]
    for k, kernel in enumerate(kernels):
        assert out[2 * k] == pytest.approx(700.0 * kernel.sum(), rel=1e-9)
        assert out[2 * k + 1] == pytest.approx(0.0, abs=1e-9)


def test_gabor_stripes_orientation_selective():
    yy, xx = np.mgrid[0:48, 0:48]
    stripes = 1000.0 + 500.0 * np.cos(2 * np.pi * xx / 10.0)  # period 10 px
    out = gabor_features(stripes)
    names = [f"t{t}_f{f}_s{s}" for t in (0, 45, 90, 135)
             for f in (0.1, 0.4) for s in (1, 3)]
    std = {n: out[2 * k + 1] for k, n in enumerate(names)}
    assert std["t0_f0.1_s3"] > std["t90_f0.1_s3"]
    assert std["t0_f0.1_s1"] > std["t90_f0.1_s1"]


def test_gabor_kernel_size():
    assert gabor_kernel(0, 0.1, 1).shape == (7, 7)
    assert gabor_kernel(45, 0.4, 3).shape == (19, 19)


# --- laws ---

def test_laws_constant_all_zero():
    out = laws_features(np.full((24, 24), 900.0))
    assert len(out) == 32
    assert np.allclose(out, 0.0, atol=1e-9)


def test_laws_horizontal_edge_orientation():
    img = np.zeros((24, 24))
    img[12:, :] = 1000.0  # horizontal step edge
    out = laws_features(img)
    names = [f"{rf}{cf}" for rf in ("L5", "E5", "S5", "R5")
             for cf in ("L5", "E5", "S5", "R5")]
    mean_abs = {n: out[2 * k] for k, n in enumerate(names)}
    assert mean_abs["E5L5"] > mean_abs["L5E5"]


# --- lbp ---

def test_lbp_identical_pair_perfect_agreement():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 4000, size=(24, 24)).astype(np.uint16)
    planes = {"dapi": img, "ck": img.copy(),
              "cd45": rng.integers(0, 4000, size=(24, 24)).astype(np.uint16)}
    vals, _ = lbp_features(planes)
    assert vals[0] == pytest.approx(1.0)  # corr dapi-ck
    assert vals[1] == pytest.approx(1.0)  # nmi dapi-ck


def test_lbp_constant_vs_textured_degenerate():
    rng = np.random.default_rng(1)
    planes = {"dapi": np.full((24, 24), 500, dtype=np.uint16),
              "ck": rng.integers(0, 4000, size=(24, 24)).astype(np.uint16),
              "cd45": rng.integers(0, 4000, size=(24, 24)).astype(np.uint16)}
    vals, flags = lbp_features(planes)
    assert vals[0] == 0.0   # corr against constant codes, flagged
    assert vals[1] == 0.0   # one-sided zero entropy
    assert any("zero_variance" in f for f in flags)


def test_lbp_independent_channels_low_correlation():
    rng = np.random.default_rng(123)
    planes = {ch: rng.integers(0, 65535, size=(24, 24)).astype(np.uint16)
              for ch in CHANNELS}
    vals, _ = lbp_features(planes)
    assert abs(vals[0]) < 0.2


def test_lbp_code_east_neighbor_bit():
    img = np.zeros((3, 3))
    img[1, 2] = 10.0  # east neighbor of the center exceeds it
    codes = lbp_codes(img)
    assert codes[1, 1] & 1  # bit 0 is the east neighbor


# --- extract ---

def test_extract_returns_122_finite_named_values():
    planes, nuc, cell = _cell_planes()
    fv = extract(planes, nuc, cell, FeatureConfig(ck_cutoff=300.0))
    assert len(fv.values) == 122
    assert np.isfinite(fv.values).all()
    assert fv["Nuc_Size"] == nuc.sum()


def test_extract_ctc_vs_wbc_contrast():
    ctc_planes, nuc, cell = _cell_planes(seed=1, peaks=(3000.0, 2800.0, 120.0))
    wbc_planes, _, _ = _cell_planes(seed=2, peaks=(3000.0, 80.0, 5000.0))
    ctc = extract(ctc_planes, nuc, cell, FeatureConfig(300.0))
    wbc = extract(wbc_planes, nuc, cell, FeatureConfig(300.0))
    assert ctc["Nuc_MFI_ck"] > wbc["Nuc_MFI_ck"]
    assert wbc["Nuc_MFI_cd45"] > ctc["Nuc_MFI_cd45"]


def test_extract_deterministic():
    planes, nuc, cell = _cell_planes(seed=9)
    a = extract(planes, nuc, cell, FeatureConfig(300.0))
    b = extract(planes, nuc, cell, FeatureConfig(300.0))
    assert np.array_equal(a.values, b.values)


def test_extract_batch_equals_single():
    cells = []
    for seed in range(6):
        planes, nuc, cell = _cell_planes(seed=seed)
        cells.append((planes, nuc, cell))
    cfg = FeatureConfig(ck_cutoff=250.0)
    batch = extract_batch(cells, cfg)
    for (planes, nuc, cell), fv in zip(cells, batch):
        assert np.array_equal(fv.values, extract(planes, nuc, cell, cfg).values)


def test_affine_intensity_map_moves_mfi_affinely():
    planes, nuc, cell = _cell_planes(seed=4)
    fv = extract(planes, nuc, cell, FeatureConfig(300.0))
    planes2 = dict(planes)
    planes2["ck"] = (planes["ck"].astype(np.float64) * 2.0 + 50.0)
    fv2 = extract(planes2, nuc, cell, FeatureConfig(300.0))
    for name in ("Nuc_MFI_ck", "Nuc_LQI_ck", "Nuc_MQI_ck", "Nuc_UQI_ck"):
        assert fv2[name] == pytest.approx(2.0 * fv[name] + 50.0, rel=1e-12)
    assert fv2["Nuc_IQR_ck"] == pytest.approx(2.0 * fv["Nuc_IQR_ck"], rel=1e-12)


def test_vector_json_round_trip():
    planes, nuc, cell = _cell_planes(seed=6)
    fv = extract(planes, nuc, cell, FeatureConfig(300.0))
    clone = FeatureVector.from_json(fv.to_json())
    assert np.array_equal(clone.values, fv.values)
    assert clone.quality_flags == fv.quality_flags


def test_vector_requires_122_finite():
    with pytest.raises(ValueError):
        FeatureVector(values=np.zeros(121))
    bad = np.zeros(122)
    bad[5] = np.nan
    with pytest.raises(ValueError):
        FeatureVector(values=bad)


def test_bounded_features_stay_bounded_randomized():
    rng = np.random.default_rng(8)
    for _ in range(60):
        planes = {ch: rng.integers(0, 65535, size=(12, 12)).astype(np.uint16)
                  for ch in CHANNELS}
        nuc = _disk_mask(12, (6, 6), rng.uniform(2, 4))
        cell = _disk_mask(12, (6, 6), rng.uniform(4, 5.5))
        fv = extract(planes, nuc, cell | nuc, FeatureConfig(rng.uniform(0, 65535)))
        for name in ("Nuc_CKplus_ratio", "Cell_CKplus_ratio",
                     "Nuc_Coloc_ck_dapi", "Cell_Coloc_ck_dapi",
                     "LBP_NMI_dapi_ck", "LBP_NMI_ck_cd45"):
            assert 0.0 <= fv[name] <= 1.0
