import numpy as np
import pytest

from sgscl import trainer as TR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_features():
    """Random normalised features, 2 devices, balanced labels, small enough to train fast."""
    r = np.random.default_rng(0)
    n_train, n_test = 32, 16
    n = n_train + n_test
    y = np.tile(np.arange(4), n // 4)
    d = np.tile(np.repeat([0, 1], 4), n // 8)
    x = r.standard_normal((n, 12, 128)).astype(np.float32)
    x[:, :, :4] += y[:, None, None]  # learnable class cue
    split = ["train"] * n_train + ["test"] * n_test
    return TR.FeatureSet(x, y, d, [f"s{i}" for i in range(n)], split)
