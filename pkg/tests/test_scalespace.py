import math

import numpy as np
import pytest

from scaleflow.scalespace import (ASSUMED_BLUR, build_dog, build_scale_space, default_octaves,
                                  gaussian_blur, gaussian_kernel)


def _blur_oracle(img, sigma):
    """Direct 2-D sum with symmetric (edge-repeating) padding."""
    r = int(math.ceil(4 * sigma))
    x = np.arange(-r, r + 1)
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    k2 = np.outer(g, g)
    pad = np.pad(img, r, mode="symmetric")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(2 * r + 1):
        for dx in range(2 * r + 1):
            out += k2[dy, dx] * pad[dy:dy + h, dx:dx + w]
    return out


@pytest.mark.parametrize("sigma", [0.3, 0.8, 1.6, 2.5, 7.1])
def test_kernel_normalised_and_sized(sigma):
    k = gaussian_kernel(sigma)
    assert abs(k.sum() - 1.0) < 1e-12
    assert k.size == 2 * math.ceil(4 * sigma) + 1
    np.testing.assert_allclose(k, k[::-1])


def test_kernel_rejects_non_positive():
    with pytest.raises(ValueError):
        gaussian_kernel(0.0)


def test_blur_matches_direct_sum(rng):
    img = rng.uniform(size=(13, 17))
    for sigma in (0.7, 1.9):
        np.testing.assert_allclose(gaussian_blur(img, sigma), _blur_oracle(img, sigma), atol=1e-12)


def test_blur_constant_image():
    np.testing.assert_allclose(gaussian_blur(np.full((9, 12), 0.3), 2.0), 0.3, atol=1e-14)


def test_impulse_centre_value():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    assert abs(gaussian_blur(img, 1.0)[10, 10] - 1 / (2 * np.pi)) < 1e-3


def test_semigroup():
    yy, xx = np.mgrid[0:60, 0:60]
    img = 0.5 + 0.3 * np.sin(xx / 6.0) * np.cos(yy / 5.0)
    a = gaussian_blur(gaussian_blur(img, 1.2), 1.6)
    b = gaussian_blur(img, math.hypot(1.2, 1.6))
    assert np.abs(a - b)[12:-12, 12:-12].max() < 1e-3


def test_octave_shapes_and_sigmas():
    ss = build_scale_space(np.zeros((64, 64)), octaves=3)
    assert [stack[0].shape for stack in ss.gaussians] == [(64, 64), (32, 32), (16, 16)]
    assert all(len(stack) == 6 for stack in ss.gaussians)
    assert ss.sigma(0, 1) == pytest.approx(1.6 * 2 ** (1 / 3))
    assert ss.sigma(0, 1) == pytest.approx(2.016, abs=1e-3)
    assert ss.sigma(2, 0) == pytest.approx(6.4)


def test_too_many_octaves():
    with pytest.raises(ValueError):
        build_scale_space(np.zeros((16, 16)), octaves=8)
    with pytest.raises(ValueError):
        build_scale_space(np.zeros((16, 16)), octaves=1, levels=2)


def test_default_octaves_fit():
    for shape in [(16, 16), (100, 150), (480, 640)]:
        build_scale_space(np.zeros(shape), octaves=default_octaves(shape))


def test_levels_stay_in_range(rng):
    img = rng.uniform(0.2, 0.7, size=(40, 40))
    ss = build_scale_space(img)
    for _, _, _, g in ss.levels:
        assert g.min() >= 0.2 - 1e-12 and g.max() <= 0.7 + 1e-12


def test_dog_layers_constant_image():
    dog = build_dog(build_scale_space(np.full((32, 32), 0.4), octaves=2))
    assert all(stack.shape[0] == 5 for stack in dog.stacks)
    assert all(np.abs(stack).max() < 1e-12 for stack in dog.stacks)


def test_dog_is_adjacent_difference(rng):
    ss = build_scale_space(rng.uniform(size=(32, 32)), octaves=2)
    dog = build_dog(ss)
    for o, s, sig, layer in dog.layers:
        np.testing.assert_array_equal(layer, ss.gaussians[o][s + 1] - ss.gaussians[o][s])
        assert sig == pytest.approx(ss.sigma(o, s))


def test_dog_impulse_centre_closed_form():
    # level s carries total blur sqrt(rel_s^2 - assumed^2) relative to the raw impulse
    img = np.zeros((41, 41))
    img[20, 20] = 1.0
    ss = build_scale_space(img, octaves=1)
    dog = build_dog(ss)

    def g0(s):
        eff2 = ss.sigma(0, s) ** 2 - ASSUMED_BLUR ** 2
        return 1.0 / (2 * np.pi * eff2)

    for s in range(3):
        assert dog.stacks[0][s, 20, 20] == pytest.approx(g0(s + 1) - g0(s), abs=2e-4)
