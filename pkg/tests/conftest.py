import numpy as np
import pytest

from deepgmm.data import generate_synthetic, separated_spec
from deepgmm.image import MultiChannelImage, normalize_image


def image_from(values, roi=None):
    return MultiChannelImage.from_array(np.asarray(values, dtype=np.float64), roi)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def separated_pair():
    """Normalized noise-free 2-class 16x16 instance with its ground truth."""
    img, gt = generate_synthetic(separated_spec(2, 1, 16, seed=3, std=0.25))
    return normalize_image(img), gt


@pytest.fixture
def noisy_pair():
    img, gt = generate_synthetic(separated_spec(2, 1, 16, gap=3.0, seed=5, noise=0.05))
    return normalize_image(img), gt
