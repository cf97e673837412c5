import pytest

from amff.dataio import synth_generate
from amff.tensor import make_rng
from amff.trainer import TrainConfig


@pytest.fixture
def tiny_dataset():
    """Small planted dataset for fast trainer/CLI tests."""
    return synth_generate(48, 16, 0.01, make_rng(5))


def fast_config(**overrides) -> TrainConfig:
    base = dict(
        batch_size=16,
        max_epochs=4,
        lr=5e-4,
        lr_drop_epoch=3,
        early_stop_patience=20,
        seed=0,
        val_fraction=0.2,
        hidden_aff=32,
        hidden_head=32,
    )
    base.update(overrides)
    return TrainConfig(**base)
