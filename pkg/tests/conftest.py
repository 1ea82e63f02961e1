import pytest

import fedflat as ff
from fedflat.rng import stream


@pytest.fixture(scope="session")
def small_logistic():
    """A 5-device logistic instance shared by trainer and diagnostics tests."""
    dataset = ff.generate_synthetic(
        num_classes=5, input_dim=8, samples_per_class=20, cluster_spread=0.4, seed=3
    )
    partition = ff.dirichlet_partition(dataset, alpha=0.5, n_devices=5, seed=3)
    spec = ff.ModelSpec("logistic-regression", input_dim=8, num_classes=5)
    return spec, dataset, partition


@pytest.fixture
def random_theta():
    def make(spec, seed=0, scale=0.3):
        return ff.init_params(spec, stream(seed, "init"), scale=scale)

    return make
