import numpy as np
import pytest

from conftest import smooth_texture
from scaleflow.detector import Keypoint, detect_image
from scaleflow.image import resize
from scaleflow.propagation import (NCC_EPS, Seed, constant_map, match_keypoints, match_seeds,
                                   ncc_weights, propagate, propagate_matched, seeds_from_keypoints,
                                   uniform_weights)
from test_solver import dense_oracle


def ncc_scalar(img, y, x):
    """Raw and normalised 3x3 stencil for one pixel, written out long-hand."""
    h, w = img.shape
    nbrs = [(y + dy, x + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if 0 <= y + dy < h and 0 <= x + dx < w]
    vals = [img[p] for p in nbrs]
    mu = sum(vals) / len(vals)
    var = sum((v - mu) ** 2 for v in vals) / len(vals)
    raw = np.zeros((3, 3))
    for (qy, qx) in nbrs:
        if (qy, qx) == (y, x):
            continue
        raw[qy - y + 1, qx - x + 1] = 1 + (img[y, x] - mu) * (img[qy, qx] - mu) / var if var >= NCC_EPS else np.nan
    return raw, var


def test_uniform_stencils():
    st = uniform_weights((5, 6))
    np.testing.assert_allclose(st[2, 3][np.arange(3) != 1].ravel(), 1 / 8)
    assert st[2, 3, 1, 1] == 0
    corner = st[0, 0]
    assert np.count_nonzero(corner) == 3 and np.allclose(corner[corner > 0], 1 / 3)
    edge = st[0, 3]
    assert np.count_nonzero(edge) == 5 and np.allclose(edge[edge > 0], 1 / 5)
    np.testing.assert_allclose(st.sum(axis=(2, 3)), 1.0)


def test_ncc_homogeneous_falls_back_to_uniform():
    img = np.full((5, 5), 0.3)
    np.testing.assert_allclose(ncc_weights(img), uniform_weights((5, 5)))


def test_ncc_neighbour_at_mean_has_unit_raw_weight():
    # 7 * 0.2 + 0.8 + v = 9 v  puts the top neighbour exactly at the 3x3 mean
    img = np.full((3, 3), 0.2)
    img[1, 1] = 0.8
    img[0, 1] = 0.275
    assert img.mean() == pytest.approx(0.275, abs=1e-15)
    raw = ncc_weights(img, normalize=False)
    assert raw[1, 1, 0, 1] == pytest.approx(1.0, abs=1e-12)
    assert raw[1, 1, 0, 0] < 1.0


def test_ncc_checkerboard_matches_scalar():
    img = (np.indices((5, 5)).sum(axis=0) % 2).astype(float) * 0.6 + 0.2
    img[2, 3] = 0.45
    raw = ncc_weights(img, normalize=False)
    norm = ncc_weights(img)
    for y in range(5):
        for x in range(5):
            r, var = ncc_scalar(img, y, x)
            np.testing.assert_allclose(raw[y, x], r, atol=1e-10)
            if var >= NCC_EPS and np.maximum(r, 0).sum() >= NCC_EPS:
                pos = np.maximum(r, 0)
                np.testing.assert_allclose(norm[y, x], pos / pos.sum(), atol=1e-10)
    np.testing.assert_allclose(norm.sum(axis=(2, 3)), 1.0, atol=1e-12)


def test_constant_seeds_constant_map(textured):
    seeds = [Seed(3, 4, 8 / 3), Seed(40, 20, 8 / 3), Seed(70, 60, 8 / 3)]
    for scheme in ("geometric", "image"):
        m = propagate(textured, seeds, scheme)
        assert np.abs(m.scale - 8 / 3).max() < 1e-6


def test_two_seed_profile_blank_image():
    img = np.zeros((9, 9))
    m = propagate(img, [Seed(0, 4, 1.0), Seed(8, 4, 4.0)], "geometric")
    row = m.scale[4]
    assert np.all(np.diff(row) > 0)
    assert 1 <= m.scale[:, 4].min() and m.scale[:, 4].max() <= 4
    np.testing.assert_allclose(m.scale, m.scale[::-1], atol=1e-8)


def test_image_aware_respects_edge():
    img = np.zeros((21, 21))
    img[:, 11:] = 1.0
    m = propagate(img, [Seed(0, 10, 1.0), Seed(20, 10, 4.0)], "image")
    assert abs(m.scale[:, :11].mean() / 1.0 - 1) < 0.15
    assert abs(m.scale[:, 11:].mean() / 4.0 - 1) < 0.15
    g = propagate(img, [Seed(0, 10, 1.0), Seed(20, 10, 4.0)], "geometric")
    assert abs(g.scale[:, :11].mean() - 1) > 0.5


def test_seed_values_exact_and_clamped(textured, rng):
    seeds = [Seed(int(rng.integers(0, 80)), int(rng.integers(0, 64)), float(s))
             for s in rng.uniform(0.5, 24, size=8)]
    for scheme in ("geometric", "image"):
        m = propagate(textured, seeds, scheme)
        for s in seeds:
            assert m.scale[s.y, s.x] == s.sigma
            assert m.seed_mask[s.y, s.x]
        assert m.seed_mask.sum() == len({(s.x, s.y) for s in seeds})
        assert m.scale.min() >= 0.5 and m.scale.max() <= 24


def test_geometric_maximum_principle(rng):
    seeds = [Seed(int(x), int(y), float(s)) for x, y, s in
             zip(rng.integers(0, 30, 6), rng.integers(0, 20, 6), rng.uniform(1, 9, 6))]
    m = propagate(np.zeros((20, 30)), seeds, "geometric")
    lo = min(s.sigma for s in seeds)
    hi = max(s.sigma for s in seeds)
    assert m.scale.min() >= lo - 1e-9 and m.scale.max() <= hi + 1e-9


@pytest.mark.parametrize("scheme", ["geometric", "image"])
def test_translation_equivariance(scheme, rng):
    # a closed ring of seeds decouples its interior from the rest of the canvas
    tex = smooth_texture((20, 20), seed=5, max_freq=0.3)
    ring_vals = rng.uniform(1, 6, size=(20, 20))

    def run(offset):
        canvas = np.zeros((30, 50))
        canvas[5:25, offset:offset + 20] = tex
        seeds = [Seed(offset + x, 5 + y, float(ring_vals[y, x])) for y in range(20) for x in range(20)
                 if y in (0, 19) or x in (0, 19)]
        return propagate(canvas, seeds, scheme, tol=1e-12).scale[5:25, offset:offset + 20]

    a = run(5)
    b = run(15)
    assert np.abs(a - b).max() < 1e-6


def test_blank_image_aware_is_harmonic():
    seeds = [Seed(1, 1, 2.0), Seed(10, 3, 5.0), Seed(5, 8, 3.0)]
    m = propagate(np.full((10, 12), 0.5), seeds, "image", tol=1e-12)
    oracle = dense_oracle(uniform_weights((10, 12)), [((s.x, s.y), s.sigma) for s in seeds])
    assert np.abs(m.scale - oracle).max() < 1e-6


def test_propagate_validation(textured):
    with pytest.raises(ValueError):
        propagate(textured, [], "geometric")
    with pytest.raises(ValueError):
        propagate(textured, [Seed(0, 0, 1.0)], "bogus")


def test_seeds_from_keypoints_collisions():
    kps = [Keypoint(2.4, 3.6, 2.0, 0.02), Keypoint(1.6, 4.4, 3.0, -0.05), Keypoint(9.9, 0.2, 40.0, 0.1)]
    seeds = seeds_from_keypoints(kps, (6, 10))
    assert Seed(2, 4, 3.0) in seeds and len(seeds) == 2
    assert Seed(9, 0, 24.0) in seeds
    with pytest.raises(ValueError):
        seeds_from_keypoints([], (3, 3))


def test_constant_map():
    m = constant_map((3, 4), 8 / 3)
    assert m.scale.shape == (3, 4) and np.all(m.scale == 8 / 3) and not m.seed_mask.any()


def _grid_keypoints(n, shape, rng):
    h, w = shape
    pts = set()
    while len(pts) < n:
        pts.add((int(rng.integers(20, w - 20)), int(rng.integers(20, h - 20))))
    return [Keypoint(float(x), float(y), float(rng.uniform(2, 4)), 0.05, 0.0) for x, y in sorted(pts)]


def test_match_identity_pair(natural_small):
    kps = detect_image(natural_small)
    sa, sb, kept = match_seeds(natural_small, natural_small, kps, kps)
    assert sa == sb
    assert all(m.kp_a == m.kp_b for m in kept)


def test_keep_fraction_on_fifty_matches(natural_small, rng):
    kps = _grid_keypoints(50, natural_small.shape, rng)
    matches = match_keypoints(natural_small, natural_small, kps, kps)
    assert len(matches) == 50
    assert [m.ratio for m in matches] == sorted(m.ratio for m in matches)
    sa, sb, kept = match_seeds(natural_small, natural_small, kps, kps, 0.2)
    assert len(kept) == 10 and len(sa) == 10 and len(sb) == 10


def test_match_requires_keypoints(natural_small):
    with pytest.raises(ValueError):
        match_seeds(natural_small, natural_small, [], [Keypoint(1, 1, 2, 0.1)])


def _half_pair():
    from skimage import data as skdata
    img = skdata.chelsea().astype(float) / 255 @ np.array([0.299, 0.587, 0.114])
    return img, resize(img, 0.5)


def test_matched_scale_ratio_under_half_resize():
    a, b = _half_pair()
    _, _, kept = match_seeds(a, b, detect_image(a), detect_image(b))
    ratios = [m.kp_b.sigma / m.kp_a.sigma for m in kept]
    assert 0.4 <= np.median(ratios) <= 0.6


def test_match_aware_maps_follow_resize():
    a, b = _half_pair()
    ma, mb = propagate_matched(a, b, detect_image(a), detect_image(b))
    assert ma.method == mb.method == "match"
    ys, xs = np.mgrid[0:b.shape[0], 0:b.shape[1]]
    ratio = ma.scale[np.minimum(2 * ys, a.shape[0] - 1), np.minimum(2 * xs, a.shape[1] - 1)] / mb.scale
    assert 1.6 <= ratio.mean() <= 2.4


def test_match_aware_identical_pair(natural_small):
    kps = detect_image(natural_small)
    ma, mb = propagate_matched(natural_small, natural_small, kps, kps)
    np.testing.assert_array_equal(ma.scale, mb.scale)
