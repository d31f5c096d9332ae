import numpy as np
import pytest
from skimage import data as skdata

from scaleflow.image import resize_to


def smooth_texture(shape, seed=0, scale=1.0, n_waves=12, max_freq=0.12):
    """Band-limited analytic texture sampled at ``(x / scale, y / scale)``.

    Rendering the same seed at ``scale=2`` gives an exact 2x magnification:
    pixel (2x, 2y) of the large image equals pixel (x, y) of the small one.
    """
    rng = np.random.default_rng(seed)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx /= scale
    yy /= scale
    out = np.zeros(shape)
    for _ in range(n_waves):
        f = rng.uniform(0.02, max_freq)
        th = rng.uniform(0, np.pi)
        ph = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy) + ph)
    out -= out.min()
    return out / out.max()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def natural_small():
    """Astronaut photograph at about 100x150, grayscale."""
    img = skdata.astronaut().astype(np.float64) / 255.0
    gray = img @ np.array([0.299, 0.587, 0.114])
    return resize_to(gray[40:360, 20:500], (100, 150))


@pytest.fixture(scope="session")
def textured():
    return smooth_texture((64, 80), seed=3, max_freq=0.2)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
