import numpy as np
import pytest

from upres.imaging import ImageBuffer


@pytest.fixture
def gradient_16() -> ImageBuffer:
    """16x16 smooth gradient, distinct per channel."""
    y, x = np.mgrid[0:16, 0:16] / 15.0
    arr = np.stack([x, y, (x + y) / 2.0], axis=-1)
    return ImageBuffer(arr)


@pytest.fixture
def checkerboard_16() -> ImageBuffer:
    y, x = np.mgrid[0:16, 0:16]
    cell = ((x + y) % 2).astype(np.float64)
    return ImageBuffer(np.stack([cell] * 3, axis=-1))


def rng_image(rng: np.random.Generator, width: int, height: int) -> ImageBuffer:
    return ImageBuffer(rng.random((height, width, 3)))
