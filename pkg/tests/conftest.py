import numpy as np
import pytest

from synthgen import PhantomConfig, generate_dataset
from train_model import TrainConfig

# Small enough to train in seconds on a CPU
TINY_PHANTOMS = dict(
    seed=0,
    num_samples=10,
    frame_count=16,
    height=32,
    width=32,
    tumors_per_sample_range=(1, 2),
    tumor_radius_range=(3.0, 5.0),
    artifact_amplitude=0.3,
    train_fraction=0.5,
)


@pytest.fixture(scope="session")
def tiny_config():
    return PhantomConfig(**TINY_PHANTOMS)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    return generate_dataset(tiny_config, tmp_path_factory.mktemp("tiny_dataset"))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        batch_size=4,
        epochs=2,
        tdl_warmup_epochs=1,
        base_width=4,
        depth=2,
        val_fraction=0.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
