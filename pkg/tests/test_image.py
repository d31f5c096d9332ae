import numpy as np
import pytest
from PIL import Image

from scaleflow.image import (CorruptImageError, MissingFileError, UnsupportedFormatError,
                             load_image, pad_to, resize, save_png, to_grayscale, warp_backward)


def _bilinear_scalar(img, y, x):
    h, w = img.shape
    if not (0 <= y <= h - 1 and 0 <= x <= w - 1):
        return 0.0
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def test_pgm_bytes_map_to_unit_interval(tmp_path):
    path = tmp_path / "tiny.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_image(path)
    assert img.shape == (2, 2)
    np.testing.assert_array_equal(img.ravel(), [0, 1, 128 / 255, 64 / 255])


def test_ppm_loads_rgb(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 51]))
    np.testing.assert_allclose(load_image(path)[0, 0], [1.0, 0.0, 0.2])


def test_missing_file(tmp_path):
    with pytest.raises(MissingFileError):
        load_image(tmp_path / "nope.png")


def test_jpeg_rejected(tmp_path):
    path = tmp_path / "x.jpg"
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(path, format="JPEG")
    with pytest.raises(UnsupportedFormatError):
        load_image(path)


def test_garbage_rejected(tmp_path):
    path = tmp_path / "x.png"
    path.write_bytes(b"not an image at all")
    with pytest.raises(UnsupportedFormatError):
        load_image(path)


def test_truncated_png_is_corrupt(tmp_path):
    path = tmp_path / "t.png"
    Image.fromarray((np.arange(64 * 64) % 251).astype(np.uint8).reshape(64, 64)).save(path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CorruptImageError):
        load_image(path)


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.uniform(size=(5, 7, 3)) * 255) / 255
    save_png(img, tmp_path / "a.png")
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)


def test_grayscale_weights():
    px = np.array([[[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0], [1.0, 1.0, 1.0]]])
    np.testing.assert_allclose(to_grayscale(px)[0], [0.299, 0.587, 0.114, 1.0], atol=1e-12)


def test_grayscale_idempotent(rng):
    rgb = rng.uniform(size=(4, 5, 3))
    g = to_grayscale(rgb)
    np.testing.assert_array_equal(to_grayscale(g), g)
    np.testing.assert_array_equal(to_grayscale(g[..., None]), g)


def test_resize_dimensions():
    assert resize(np.zeros((60, 100)), 1.0).shape == (60, 100)
    assert resize(np.zeros((60, 100)), 0.2).shape == (12, 20)
    assert resize(np.zeros((60, 100, 3)), 0.7).shape == (42, 70, 3)


def test_resize_zero_size_rejected():
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), 0.01)
    with pytest.raises(ValueError):
        resize(np.zeros((4, 4)), -1)


@pytest.mark.parametrize("factor", [0.2, 0.5, 0.7, 1.3, 2.0])
def test_resize_preserves_constants(factor):
    out = resize(np.full((30, 41), 0.37), factor)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_resize_up_down_round_trip():
    yy, xx = np.mgrid[0:40, 0:50]
    img = 0.5 + 0.4 * np.sin(xx / 9.0) * np.cos(yy / 7.0)
    back = resize(resize(img, 2.0), 0.5)
    assert back.shape == img.shape
    assert np.abs(back - img).max() < 0.1


def test_resize_pixel_centre_alignment():
    # upsampling a linear ramp by 2 with centre alignment keeps it linear
    ramp = np.tile(np.arange(8, dtype=float), (3, 1))
    up = resize(ramp, 2.0, antialias=False)
    expected = np.clip((np.arange(16) + 0.5) / 2 - 0.5, 0, 7)
    np.testing.assert_allclose(up[1], expected, atol=1e-12)


def test_warp_zero_flow_is_identity(rng):
    t = rng.uniform(size=(6, 9, 3))
    out, valid = warp_backward(t, np.zeros((6, 9)), np.zeros((6, 9)))
    np.testing.assert_array_equal(out, t)
    assert valid.all()


def test_warp_constant_shift_on_gradient():
    grad = np.tile(np.linspace(0, 1, 20), (5, 1))
    out, valid = warp_backward(grad, np.full((5, 20), 5.0), np.zeros((5, 20)))
    np.testing.assert_allclose(out[:, :15], grad[:, 5:], atol=1e-12)
    assert valid[:, :15].all() and not valid[:, 15:].any()
    assert (out[:, 15:] == 0).all()


def test_warp_out_of_bounds():
    out, valid = warp_backward(np.ones((4, 4)), np.full((4, 4), 100.0), np.zeros((4, 4)))
    assert (out == 0).all() and not valid.any()


def test_warp_matches_scalar_bilinear(rng):
    t = rng.uniform(size=(7, 8))
    u = rng.uniform(-2, 2, size=(7, 8))
    v = rng.uniform(-2, 2, size=(7, 8))
    out, _ = warp_backward(t, u, v)
    for y in range(7):
        for x in range(8):
            assert out[y, x] == pytest.approx(_bilinear_scalar(t, y + v[y, x], x + u[y, x]), abs=1e-12)


def test_pad_to_centres():
    out, (ox, oy) = pad_to(np.ones((2, 3)), (6, 8))
    assert (ox, oy) == (2, 2)
    assert out.sum() == 6 and out[2:4, 2:5].all()
    with pytest.raises(ValueError):
        pad_to(np.ones((5, 5)), (4, 6))
