import numpy as np
import pytest

from dosewarp.grid import GridGeometry, LabelVolume, ScalarVolume


@pytest.fixture
def small_geom():
    return GridGeometry((8, 8, 8), (1.0, 1.0, 1.0))


@pytest.fixture
def aniso_geom():
    return GridGeometry((10, 8, 6), (1.5, 2.0, 2.5), (-4.0, 3.0, 0.5))


def random_volume(geom, seed=0):
    rng = np.random.default_rng(seed)
    return ScalarVolume(geom, rng.normal(size=geom.dims))


def random_labels(geom, seed=0, p_fg=0.3):
    rng = np.random.default_rng(seed)
    data = np.where(rng.random(geom.dims) < p_fg,
                    rng.integers(1, 5, size=geom.dims), 0)
    return LabelVolume(geom, data)


def smooth_volume(geom, seed=0, sigma=1.5):
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(seed)
    return ScalarVolume(geom, gaussian_filter(rng.normal(size=geom.dims),
                                              sigma, mode="nearest"))
