import numpy as np
import pytest

from avreason import backbone as bb
from avreason.sequence import LatentBudget
from avreason.synthworld import EncoderBank, WorldConfig, generate_episode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_world():
    return WorldConfig(T=8, visual_alphabet=4, audio_alphabet=4, feature_dim=4, seed=3)


@pytest.fixture
def small_budget():
    return LatentBudget(4, 3, 1)


@pytest.fixture
def small_state(small_world):
    cfg = bb.ModelConfig(layers=2, heads=2, dim=16, vocab_size=small_world.vocab_needed, feature_dim_visual=4,
                         feature_dim_audio=4, max_sequence=128)
    return bb.init_state(cfg, 0)


@pytest.fixture
def small_bank(small_world):
    return EncoderBank(small_world)


@pytest.fixture
def small_episode(small_world, small_budget):
    return generate_episode(small_world, 0, small_budget)
