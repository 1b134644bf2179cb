import numpy as np
import pytest

from bria.synth import SlideSpec, _blob_profile, generate_slide


def render_disk_plane(shape, center, radius, peak, baseline=100.0, rng=None,
                      read_sigma=3.0):
    """One noisy blob on a flat background, plus its half-max truth mask."""
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    dist = np.hypot(xx - center[0], yy - center[1])
    expected = baseline + peak * _blob_profile(dist, radius)
    truth = _blob_profile(dist, radius) >= 0.5
    if rng is None:
        img = expected
    else:
        img = rng.poisson(np.clip(expected, 0, None)).astype(np.float64)
        img += rng.normal(0.0, read_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16), truth


def dice(a, b) -> float:
    denom = a.sum() + b.sum()
    return 2.0 * float((a & b).sum()) / float(denom) if denom else 0.0


@pytest.fixture(scope="session")
def small_slide():
    """2x2 synthetic slide shared by read-only tests."""
    spec = SlideSpec(grid_rows=2, grid_cols=2, fov_width_px=384, fov_height_px=384,
                     counts={"ctc": 4, "wbc": 36}, seed=77)
    slide, truth = generate_slide(spec)
    return spec, slide, truth
