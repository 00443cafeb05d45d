import numpy as np
import pytest

from avreason import backbone as bb
from avreason import checkpoint
from avreason import tensor as tc
from avreason.errors import FormatError
from avreason.ospe import PositionPlan
from avreason.sequence import LatentBudget
from avreason.synthworld import EncoderBank, WorldConfig, generate_episodes
from avreason.trainer import OptimState, TrainConfig, train

BUDGET = LatentBudget(4, 3, 1)
WORLD = WorldConfig(T=8, visual_alphabet=4, audio_alphabet=4, feature_dim=4, seed=5)


def fresh(seed=0):
    return bb.init_state(bb.ModelConfig(layers=2, heads=2, dim=16, vocab_size=WORLD.vocab_needed,
                                        feature_dim_visual=4, feature_dim_audio=4, max_sequence=128), seed)


@pytest.fixture
def saved(tmp_path):
    state = fresh(1)
    optim = OptimState.for_model(state)
    eps = generate_episodes(WORLD, 0, 6, BUDGET, threads=1)
    train(state, optim, eps, TrainConfig(total_steps=2, grad_accumulation=2), EncoderBank(WORLD), BUDGET)
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, state, optim, {"note": "x"})
    return path, state, optim


def test_round_trip_is_bit_exact(saved):
    path, state, optim = saved
    s2, o2, extra = checkpoint.load(path)
    assert extra == {"note": "x"} and s2.config == state.config and s2.names() == state.names()
    for a, b in zip(state.parameters(), s2.parameters()):
        assert np.array_equal(a.data, b.data)
    for k in state.params:
        assert np.array_equal(optim.m[k], o2.m[k]) and np.array_equal(optim.v[k], o2.v[k])
    assert o2.step == optim.step == 2
    x = tc.Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    plan = PositionPlan(np.arange(5.0), ["text"] * 5)
    assert np.array_equal(bb.forward(x, plan, state)[1].data, bb.forward(x, plan, s2)[1].data)


def test_layout(saved):
    path = saved[0]
    raw = path.read_bytes()
    assert raw[:6] == b"LOMNI1"
    assert int.from_bytes(raw[6:10], "little") == 1


def test_corrupted_magic(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[0:1] = b"X"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        checkpoint.load(path)


def test_bad_version(saved):
    path = saved[0]
    raw = bytearray(path.read_bytes())
    raw[6] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        checkpoint.load(path)


@pytest.mark.parametrize("cut", [3, 12, 200, 8])
def test_truncation(saved, cut):
    path = saved[0]
    raw = path.read_bytes()
    path.write_bytes(raw[:cut] if cut < 100 else raw[:-cut])
    with pytest.raises(FormatError):
        checkpoint.load(path)


def test_missing_parameter_rejected(tmp_path):
    state = fresh()
    del state.params["head.bias"]
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, state)
    with pytest.raises(FormatError, match="head.bias"):
        checkpoint.load(path)


def test_without_optimizer(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, fresh())
    _, optim, extra = checkpoint.load(path)
    assert optim is None and extra == {}
