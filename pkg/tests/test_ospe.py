import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avreason import ospe
from avreason import tensor as tc
from avreason.anchors import SegmentRef
from avreason.errors import ContractError, DataError, ShapeError
from avreason.sequence import HybridSequence, LatentBudget, LatentState, Stop, TextToken, Trigger

T = tc.Tensor


def test_basis_dim4():
    assert np.allclose(ospe.build_basis(4, 10000).thetas, [1.0, 0.01], rtol=1e-15)


def test_basis_dim2_any_base():
    for base in (2.0, 10.0, 1e4):
        assert np.array_equal(ospe.build_basis(2, base).thetas, [1.0])


def test_basis_dim8_follows_exponent_rule():
    # oracle: base ** (-2 i / dim) evaluated term by term
    oracle = [10000.0 ** (-2 * i / 8) for i in range(4)]
    assert np.allclose(ospe.build_basis(8, 10000).thetas, oracle, rtol=1e-14)
    assert np.allclose(oracle, [1.0, 0.1, 0.01, 0.001], rtol=1e-14)


def test_half_decade_spacing_needs_dim16():
    # thetas 1, 10^-1/2, 10^-1, 10^-3/2 are the first four of a width-16 basis
    th = ospe.build_basis(16, 10000).thetas[:4]
    assert np.allclose(th, [1.0, 0.31623, 0.1, 0.031623], rtol=1e-4)


def test_basis_strictly_decreasing():
    th = ospe.build_basis(64).thetas
    assert th[0] == 1.0 and (np.diff(th) < 0).all()


@pytest.mark.parametrize("dim,base", [(3, 10000.0), (0, 10000.0), (4, 1.0)])
def test_basis_rejects_bad_arguments(dim, base):
    with pytest.raises(ContractError):
        ospe.build_basis(dim, base)


def test_quarter_turn():
    out = ospe.apply(T([1.0, 0.0]), math.pi / 2, ospe.build_basis(2)).data
    assert np.allclose(out, [0.0, 1.0], atol=1e-15)


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        ospe.apply(T(np.ones(6)), 1.0, ospe.build_basis(4))


def test_rotation_matches_block_matrix():
    # oracle: explicit block-diagonal 2x2 rotation matrices
    rng = np.random.default_rng(0)
    basis = ospe.build_basis(8)
    h, t = rng.normal(size=8), 3.7
    R = np.zeros((8, 8))
    for i, th in enumerate(basis.thetas):
        c, s = math.cos(t * th), math.sin(t * th)
        R[2 * i:2 * i + 2, 2 * i:2 * i + 2] = [[c, -s], [s, c]]
    assert np.allclose(ospe.apply(T(h), t, basis).data, R @ h, atol=1e-14)


vec = st.integers(1, 16).flatmap(
    lambda n: st.tuples(st.lists(st.floats(-10, 10), min_size=2 * n, max_size=2 * n),
                        st.lists(st.floats(-10, 10), min_size=2 * n, max_size=2 * n)))
times = st.floats(0, 100)


@settings(max_examples=200, deadline=None)
@given(vec)
def test_identity_at_zero(qk):
    q = np.array(qk[0])
    assert np.array_equal(ospe.apply(T(q), 0.0, ospe.build_basis(len(q))).data, q)


@settings(max_examples=200, deadline=None)
@given(vec, times)
def test_isometry(qk, t):
    q = np.array(qk[0])
    out = ospe.apply(T(q), t, ospe.build_basis(len(q))).data
    assert abs(np.linalg.norm(out) - np.linalg.norm(q)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(vec, times, times, st.floats(-100, 100))
def test_relative_shift(qk, t1, t2, delta):
    q, k = np.array(qk[0]), np.array(qk[1])
    b = ospe.build_basis(len(q))
    lhs = ospe.apply(T(q), t1, b).data @ ospe.apply(T(k), t2, b).data
    rhs = ospe.apply(T(q), t1 + delta, b).data @ ospe.apply(T(k), t2 + delta, b).data
    assert abs(lhs - rhs) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(times)
def test_synchrony_equal_timestamps_equal_rotation(t):
    b = ospe.build_basis(8)
    c1, s1 = ospe.angles(np.array([t, t]), b)
    assert np.array_equal(c1[0], c1[1]) and np.array_equal(s1[0], s1[1])


def test_shared_timestamps_for_matching_streams():
    seq = HybridSequence([5], [TextToken(7)], 4, 4)
    plan = ospe.assign_timestamps(seq, 1.0)
    assert np.array_equal(plan.timestamps[:4], [0, 1, 2, 3])
    assert np.array_equal(plan.timestamps[4:8], [0, 1, 2, 3])
    assert plan.tags[:8] == ["visual-prompt"] * 4 + ["audio-prompt"] * 4


def test_text_continues_after_prompt():
    seq = HybridSequence([5, 6], [TextToken(7)], 4, 4)
    plan = ospe.assign_timestamps(seq, 1.0)
    assert np.array_equal(plan.timestamps[8:], [4, 5, 6])


def test_frame_rate_scales_prompt_times():
    seq = HybridSequence([5], [TextToken(7)], 4, 4)
    plan = ospe.assign_timestamps(seq, 2.0)
    assert np.array_equal(plan.timestamps[:4], [0, 0.5, 1.0, 1.5])


def test_latent_phase_uses_segment_midpoint():
    budget = LatentBudget(4, 2, 2)
    gen = [TextToken(9), Trigger()] + [LatentState(k) for k in range(4)] + [Stop(), TextToken(3)]
    seq = HybridSequence([5], gen, 6, 6)
    refs = [SegmentRef("visual", 2.0, 4.0), SegmentRef("audio", 2.0, 4.0)]
    plan = ospe.assign_timestamps(seq, 1.0, refs, budget)
    lat = [t for t, g in zip(plan.timestamps, plan.tags) if g.startswith("latent")]
    assert lat == [3.0] * 4


def test_multiple_segments_split_across_latents():
    budget = LatentBudget(5, 4, 1)
    gen = [Trigger()] + [LatentState(k) for k in range(5)] + [Stop(), TextToken(3)]
    seq = HybridSequence([5], gen, 10, 10)
    refs = [SegmentRef("visual", 0.0, 2.0), SegmentRef("audio", 6.0, 8.0), SegmentRef("visual", 4.0, 8.0)]
    plan = ospe.assign_timestamps(seq, 1.0, refs, budget)
    lat = [t for t, g in zip(plan.timestamps, plan.tags) if g.startswith("latent")]
    assert lat == [1.0, 1.0, 6.0, 6.0, 7.0]


def test_pure_text_gives_integers_from_zero():
    seq = HybridSequence([5, 6, 7], [TextToken(8), TextToken(9)])
    plan = ospe.assign_timestamps(seq, 1.0, [])
    assert np.array_equal(plan.timestamps, np.arange(5.0))


def test_unresolvable_segment():
    seq = HybridSequence([5], [TextToken(7)], 4, 4)
    with pytest.raises(DataError):
        ospe.assign_timestamps(seq, 1.0, [SegmentRef("visual", 2.0, 40.0)])


def test_integer_plan_keeps_tags():
    seq = HybridSequence([5], [TextToken(7)], 2, 2)
    plan = ospe.assign_timestamps(seq, 1.0)
    ip = ospe.integer_plan(plan)
    assert np.array_equal(ip.timestamps, np.arange(6.0)) and ip.tags == plan.tags


def test_prompt_timestamps_non_decreasing_per_modality():
    seq = HybridSequence([5], [TextToken(7)], 7, 5)
    t = ospe.assign_timestamps(seq, 3.0).timestamps
    assert (np.diff(t[:7]) >= 0).all() and (np.diff(t[7:12]) >= 0).all() and (t >= 0).all()


def test_rotation_gradient():
    rng = np.random.default_rng(2)
    cos, sin = ospe.angles(rng.uniform(0, 9, 4), ospe.build_basis(6))
    w = rng.normal(size=(4, 6))
    err = tc.grad_check(lambda h: tc.sum_(tc.mul(ospe.rotate(h, cos, sin), w)), [T(rng.normal(size=(4, 6)))])
    assert err <= 1e-6
