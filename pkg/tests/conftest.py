import numpy as np
import pytest

from clustermark.clustering import ClusterMap


@pytest.fixture()
def rng():
    # function-scoped so every test sees the same draws regardless of
    # execution order
    return np.random.default_rng(12345)


def random_cluster_map(rng, n_tokens: int, h: int, dim: int = 2) -> ClusterMap:
    """Arbitrary valid assignment (every cluster non-empty); centroids are
    placeholders for tests that never touch geometry."""
    assignment = rng.integers(0, h, n_tokens)
    assignment[:h] = np.arange(h)
    return ClusterMap(h=h, assignment=assignment,
                      centroids=np.zeros((h, dim)))


def balanced_cluster_map(n_tokens: int, h: int, dim: int = 2) -> ClusterMap:
    assignment = np.arange(n_tokens) % h
    return ClusterMap(h=h, assignment=assignment,
                      centroids=np.zeros((h, dim)))


class ConstantModel:
    """Same next-token distribution at every step."""

    def __init__(self, dist):
        self.dist = np.asarray(dist, dtype=np.float64)
        self.vocab_size = self.dist.shape[0]

    def next_dist(self, context):
        return self.dist
