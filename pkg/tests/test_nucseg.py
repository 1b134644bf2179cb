import numpy as np
import pytest

from bria.errors import DegenerateInput, EmptyMask
from bria.nucseg import otsu_split, otsu_threshold, radial_transform, segment_nucleus
from bria.synth import _blob_profile
from tests.conftest import dice, render_disk_plane


def brute_force_otsu_split(counts):
    """Exhaustive scan of every split maximizing between-class variance."""
    counts = np.asarray(counts, dtype=np.float64)
    best_k, best_score = None, -1.0
    total = counts.sum()
    for k in range(len(counts) - 1):
        w0 = counts[: k + 1].sum()
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            score = 0.0
        else:
            mu0 = (counts[: k + 1] * np.arange(k + 1)).sum() / w0
            mu1 = (counts[k + 1:] * np.arange(k + 1, len(counts))).sum() / w1
            score = w0 * w1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_k, best_score = k, score
    return best_k


def test_otsu_bimodal_threshold_between_modes():
    values = np.array([0.0] * 50 + [200.0] * 50)
    t = otsu_threshold(values)
    assert 0.0 < t < 200.0


def test_otsu_matches_brute_force_on_random_histograms():
    rng = np.random.default_rng(42)
    for _ in range(300):
        counts = rng.integers(0, 50, size=256)
        counts[rng.integers(0, 256)] += rng.integers(0, 500)
        if np.count_nonzero(counts) < 2:
            continue
        assert otsu_split(counts) == brute_force_otsu_split(counts)


def test_otsu_constant_input_degenerate():
    with pytest.raises(DegenerateInput):
        otsu_threshold(np.full(100, 7.0))
    with pytest.raises(DegenerateInput):
        counts = np.zeros(256, dtype=int)
        counts[10] = 99
        otsu_split(counts)


def test_otsu_tie_breaks_toward_lower_bin():
    counts = np.zeros(256, dtype=int)
    counts[0] = 10
    counts[255] = 10
    # every split between the two spikes scores identically
    assert otsu_split(counts) == 0


# --- radial transform ---

def test_radial_transform_constant_is_zero():
    out = radial_transform(np.full((24, 24), 500.0), (12, 12), 6.0)
    assert np.allclose(out, 0.0)


def test_radial_transform_ring_at_disk_edge():
    plane, _ = render_disk_plane((48, 48), (24, 24), 10.0, peak=3000.0)
    out = radial_transform(plane, (24, 24), 10.0)
    yy, xx = np.mgrid[0:48, 0:48]
    dist = np.hypot(xx - 24, yy - 24)
    peak_dist = dist[np.unravel_index(np.argmax(out), out.shape)]
    assert 8.0 <= peak_dist <= 13.0  # response concentrated at the boundary ring
    assert out[dist <= 5].max() <= 0.15 * out.max()  # interior quiet


def test_radial_transform_suppresses_far_neighbor():
    # weight at distance 3r with kappa=1.5 is exp(-2) < 0.15
    r = 8.0
    size = 96
    yy, xx = np.mgrid[0:size, 0:size]
    c = (30, 48)
    other = (30 + 3 * r, 48)
    img = (3000.0 * _blob_profile(np.hypot(xx - c[0], yy - c[1]), r)
           + 3000.0 * _blob_profile(np.hypot(xx - other[0], yy - other[1]), r)
           + 100.0)
    out = radial_transform(img, c, r)
    dist_main = np.hypot(xx - c[0], yy - c[1])
    dist_other = np.hypot(xx - other[0], yy - other[1])
    ring_main = (dist_main >= r - 1) & (dist_main <= r + 3)
    ring_other = (dist_other >= r - 1) & (dist_other <= r + 3) & (dist_main > r + 3)
    assert out[ring_other].max() <= 0.15 * out[ring_main].max()


# --- segment_nucleus ---

def test_centered_disk_high_dice():
    rng = np.random.default_rng(0)
    scores = []
    for trial in range(20):
        plane, truth = render_disk_plane((24, 24), (12, 12), 8.0, peak=3000.0, rng=rng)
        mask = segment_nucleus(plane, (12, 12), 9.0)
        scores.append(dice(mask.mask, truth))
    assert np.mean(scores) >= 0.95


def test_touching_pair_excludes_neighbor():
    rng = np.random.default_rng(1)
    exclusions = []
    for trial in range(20):
        r = 6.0
        sep = 2 * (r + 1) + 1
        size = 40
        yy, xx = np.mgrid[0:size, 0:size]
        left = (14, 20)
        right = (14 + sep, 20)
        img = (3000.0 * _blob_profile(np.hypot(xx - left[0], yy - left[1]), r)
               + 3000.0 * _blob_profile(np.hypot(xx - right[0], yy - right[1]), r)
               + 100.0)
        img = rng.poisson(img) + rng.normal(0, 3.0, img.shape)
        img = np.clip(np.rint(img), 0, 65535).astype(np.uint16)
        right_truth = _blob_profile(np.hypot(xx - right[0], yy - right[1]), r) >= 0.5
        mask = segment_nucleus(img, left, r + 1.0)
        exclusions.append(1.0 - (mask.mask & right_truth).sum() / right_truth.sum())
    assert min(exclusions) >= 0.95


def test_mask_single_component_contains_center_hole_free():
    from scipy import ndimage
    rng = np.random.default_rng(2)
    plane, _ = render_disk_plane((24, 24), (12, 12), 7.0, peak=2500.0, rng=rng)
    nm = segment_nucleus(plane, (12, 12), 8.0)
    assert nm.mask[12, 12]
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    _, n = ndimage.label(nm.mask, structure=structure)
    assert n == 1
    assert np.array_equal(ndimage.binary_fill_holes(nm.mask), nm.mask)
    assert nm.area_px == int(nm.mask.sum()) > 0


def test_intensity_shift_invariance():
    rng = np.random.default_rng(3)
    plane, _ = render_disk_plane((24, 24), (12, 12), 7.0, peak=2500.0, rng=rng)
    a = segment_nucleus(plane, (12, 12), 8.0)
    b = segment_nucleus(plane.astype(np.int64) + 900, (12, 12), 8.0)
    assert np.array_equal(a.mask, b.mask)


def test_mask_bounded_by_restriction_disk():
    rng = np.random.default_rng(4)
    plane, _ = render_disk_plane((32, 32), (16, 16), 6.0, peak=2500.0, rng=rng)
    nm = segment_nucleus(plane, (16, 16), 6.0)
    ys, xs = np.nonzero(nm.mask)
    assert np.hypot(xs - 16, ys - 16).max() <= 2 * 6.0


def test_empty_mask_on_flat_zero_input():
    with pytest.raises(EmptyMask):
        segment_nucleus(np.zeros((24, 24), dtype=np.uint16), (12, 12), 6.0)


def test_batch_mean_f1_meets_bar():
    """500 synthetic nuclei incl. 20% in touching pairs, desk-scale check."""
    rng = np.random.default_rng(10)
    f1s = []
    n_single, n_pairs = 80, 10  # scaled-down version of the acceptance run
    for _ in range(n_single):
        r = rng.uniform(4.5, 7.5)
        plane, truth = render_disk_plane((24, 24), (12, 12), r, peak=3000.0, rng=rng)
        mask = segment_nucleus(plane, (12, 12), r + 1.0)
        f1s.append(dice(mask.mask, truth))
    for _ in range(n_pairs):
        r = rng.uniform(4.5, 6.0)
        sep = 2 * (r + 1) + 1
        size = 48
        yy, xx = np.mgrid[0:size, 0:size]
        left = (size // 2 - sep / 2, size // 2)
        right = (size // 2 + sep / 2, size // 2)
        img = (3000.0 * _blob_profile(np.hypot(xx - left[0], yy - left[1]), r)
               + 3000.0 * _blob_profile(np.hypot(xx - right[0], yy - right[1]), r)
               + 100.0)
        img = np.clip(np.rint(rng.poisson(img) + rng.normal(0, 3, img.shape)),
                      0, 65535).astype(np.uint16)
        for cx, cy in (left, right):
            truth = _blob_profile(np.hypot(xx - cx, yy - cy), r) >= 0.5
            mask = segment_nucleus(img, (cx, cy), r + 1.0)
            f1s.append(dice(mask.mask, truth))
    assert np.mean(f1s) >= 0.93
