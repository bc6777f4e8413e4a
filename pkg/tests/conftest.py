import numpy as np
import pytest

from droploop import ParameterSpace, PrintConditions, Raster

# 12-sample seeded training batch (conditions + vision scores) used as a
# realistic fixture for surrogate and baseline fits.
REFERENCE_TRAINING_ROWS = (
    (0.090, 20.4, 336.0, 0.462),
    (0.038, 16.7, 393.0, 0.422),
    (0.048, 24.4, 432.0, 0.356),
    (0.118, 18.0, 483.0, 0.566),
    (0.064, 36.1, 510.0, 0.309),
    (0.140, 22.0, 561.0, 0.679),
    (0.079, 26.9, 642.0, 0.370),
    (0.054, 30.9, 675.0, 0.358),
    (0.021, 39.8, 705.0, 0.358),
    (0.129, 31.9, 774.0, 0.570),
    (0.101, 34.2, 822.0, 0.501),
    (0.113, 29.4, 861.0, 0.361),
)


@pytest.fixture
def space() -> ParameterSpace:
    return ParameterSpace()


@pytest.fixture
def reference_training(space):
    return [
        (PrintConditions(p, f, v), score) for p, f, v, score in REFERENCE_TRAINING_ROWS
    ]


@pytest.fixture
def blank_raster() -> Raster:
    return Raster(pixels=np.full((64, 64), 255, dtype=np.uint8))


def make_disk_raster(
    shape: tuple[int, int], disks: list[tuple[float, float, float]], value: int = 40
) -> Raster:
    """Light background with dark filled disks at (cy, cx, r)."""
    pixels = np.full(shape, 255, dtype=np.uint8)
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    for cy, cx, r in disks:
        pixels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value
    return Raster(pixels=pixels)
