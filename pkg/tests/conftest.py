import numpy as np
import pytest

from sala.geometry import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n, extent=1.0, features=3, labels=None):
    pos = rng.uniform(0, extent, (n, 3))
    feats = rng.random((n, features)).astype(np.float32)
    lab = None if labels is None else rng.integers(0, labels, n)
    return PointCloud(pos, feats, lab)


def tiny_scene(rng, n=1500, classes=3):
    """Small two-class-by-height scene with RGB features correlated with the label."""
    pos = rng.uniform(0, 1.2, (n, 3))
    labels = np.minimum((pos[:, 2] / 1.2 * classes).astype(int), classes - 1)
    base = np.eye(3)[labels % 3] * 0.6 + 0.2
    feats = np.clip(base + rng.normal(0, 0.05, (n, 3)), 0, 1).astype(np.float32)
    return PointCloud(pos, feats, labels)
