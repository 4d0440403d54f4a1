import numpy as np
import pytest

from seenet import ModelConfig, SeeNet


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        num_classes=3,
        backbone_channels=(4, 8),
        backbone_strides=(1, 2),
        branch_channels=8,
        branch_depth=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return SeeNet(tiny_config(), seed=7)
