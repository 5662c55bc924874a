import numpy as np
import pytest

from tailreg.dataset import generate, preset_config


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate(preset_config("tiny", seed=1))


@pytest.fixture(scope="session")
def tiny_clean_dataset():
    return generate(preset_config("tiny-clean", seed=1))


def random_box(rng: np.random.Generator, lo: float = 0.0, hi: float = 100.0,
               min_side: float = 1.0, max_side: float = 40.0):
    from tailreg.geometry import Box

    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, max_side)
    x1 = rng.uniform(lo, hi - w)
    y1 = rng.uniform(lo, hi - h)
    return Box(x1, y1, x1 + w, y1 + h)
