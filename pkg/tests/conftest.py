import numpy as np
import pytest

from c2fcd.data import BiTemporalSample


def make_samples(n, size=32, seed=0, labelled=True):
    """Tiny in-memory bi-temporal pairs: identical backgrounds with one
    recoloured square; the mask marks the square."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        x1 = rng.random((3, size, size), dtype=np.float32)
        x2 = x1.copy()
        mask = np.zeros((size, size), dtype=np.float32)
        r, c = rng.integers(4, size - 12, size=2)
        x2[:, r:r + 8, c:c + 8] = rng.random(3, dtype=np.float32)[:, None, None]
        mask[r:r + 8, c:c + 8] = 1.0
        samples.append(BiTemporalSample(
            id=f"s{i:03d}", image_t1=x1, image_t2=x2,
            label=mask if labelled else None))
    return samples


@pytest.fixture
def tiny_samples():
    return make_samples(8, seed=1)


@pytest.fixture
def tiny_unlabelled():
    return make_samples(8, seed=2, labelled=False)


@pytest.fixture
def tiny_val():
    return make_samples(4, seed=3)
