import numpy as np
import pytest

from splitdecode.model import ModelConfig, init_model


def rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


@pytest.fixture(scope="session")
def small_config() -> ModelConfig:
    return ModelConfig(
        n_layers=2, n_heads=2, d_model=16, head_dim=8, vocab_size=64, max_seq=96, seed=7
    )


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_model(small_config)
