import numpy as np
import pytest

from ecf.data import split_dataset, synthetic_dataset
from ecf.trainer import TrainConfig, train_forest, train_mf


def small_config(**overrides) -> TrainConfig:
    base = dict(
        num_clusters=12,
        dim=12,
        item_topk=3,
        user_topk=3,
        lr=1e-2,
        batch_size=256,
        epochs_max=15,
        patience=4,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy():
    ds, tags = synthetic_dataset(num_users=150, num_items=90, num_groups=5, interactions_per_user=15, seed=3)
    return split_dataset(ds, seed=0), tags


@pytest.fixture(scope="session")
def toy_forest(toy):
    ds, tags = toy
    return train_forest(ds, tags, small_config(), F=3)


@pytest.fixture(scope="session")
def toy_mf(toy):
    ds, _ = toy
    return train_mf(ds, small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(0)
