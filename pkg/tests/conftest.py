import numpy as np
import pytest

from _helpers import textured
from hdrv.imagecore import Domain, Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ldr_rgb():
    return Image(textured(32, 40, seed=3, channels=3), Domain.LDR)
