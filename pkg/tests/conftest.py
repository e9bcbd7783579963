import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointformer.points import PointCloud
from pointformer.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_cloud(rng, n, channels=0, scale=1.0, dtype=np.float64, requires_grad=False):
    coords = Tensor(rng.uniform(-scale, scale, size=(n, 3)).astype(dtype), requires_grad=requires_grad)
    feats = Tensor(rng.normal(size=(n, channels)).astype(dtype), requires_grad=requires_grad)
    return PointCloud(coords, feats)


def sorted_pairs(coords: np.ndarray, feats: np.ndarray) -> np.ndarray:
    """Rows of [coords | feats] sorted by coordinate for order-free comparison."""
    stacked = np.concatenate([coords, feats], axis=1)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
    return stacked[order]
