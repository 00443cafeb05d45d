"""Finite-difference and invariant checks grouped into suites for the CLI.

Every check returns a :class:`CheckResult`; a suite passes when all of its
checks do.  Gradients are probed in float64 with central differences.  The
model-level checks use a 2-layer, width-16, 2-head network on a small world.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backbone as bb
from . import ospe
from . import tensor as tc
from .anchors import anchors_from_projected
from .losses import LossWeights, combine, latent_loss, sync_loss, sync_pairs, tau_of, text_loss
from .ospe import assign_timestamps
from .sequence import LatentBudget
from .synthworld import EncoderBank, WorldConfig, generate_episode

GRAD_TOL = 1e-4
STEP = 1e-5
SUITES = ("all", "losses", "backbone", "ospe")


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"{mark} {self.suite}/{self.name}: {self.value:.3e} (tolerance {self.tolerance:g})"


def _result(suite, name, value, tol, strict=False) -> CheckResult:
    ok = value < tol if strict else value <= tol
    return CheckResult(suite, name, float(value), tol, bool(ok and np.isfinite(value)))


# ---------------------------------------------------------------- rotary invariants

def ospe_invariants(cases: int = 1000, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_id = worst_iso = worst_shift = 0.0
    for _ in range(cases):
        dim = 2 * int(rng.integers(1, 33))
        basis = ospe.build_basis(dim)
        q = rng.normal(size=dim)
        k = rng.normal(size=dim)
        t1, t2 = rng.uniform(0.0, 100.0, size=2)
        delta = rng.uniform(-100.0, 100.0)
        worst_id = max(worst_id, float(np.abs(ospe.apply(tc.Tensor(q), 0.0, basis).data - q).max()))
        rq = ospe.apply(tc.Tensor(q), t1, basis).data
        worst_iso = max(worst_iso, abs(np.linalg.norm(rq) - np.linalg.norm(q)))
        lhs = rq @ ospe.apply(tc.Tensor(k), t2, basis).data
        rhs = ospe.apply(tc.Tensor(q), t1 + delta, basis).data @ ospe.apply(tc.Tensor(k), t2 + delta, basis).data
        worst_shift = max(worst_shift, abs(lhs - rhs))
    return [
        CheckResult("ospe", "identity at t=0", worst_id, 0.0, worst_id == 0.0),
        _result("ospe", "isometry", worst_iso, 1e-12),
        _result("ospe", "relative shift", worst_shift, 1e-9),
    ]


def ospe_gradient(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    basis = ospe.build_basis(16)
    h = tc.Tensor(rng.normal(size=(5, 16)))
    t = rng.uniform(0, 30, size=5)
    cos, sin = ospe.angles(t, basis)
    w = rng.normal(size=(5, 16))
    err = tc.grad_check(lambda x: tc.sum_(tc.mul(ospe.rotate(x, cos, sin), w)), [h], STEP)
    return [_result("ospe", "rotation gradient", err, GRAD_TOL)]


# ---------------------------------------------------------------- model-level fixtures

def small_setup(seed: int = 0):
    """Tiny world, latent budget and width-16 model with well-conditioned weights."""
    world = WorldConfig(T=8, visual_alphabet=4, audio_alphabet=4, feature_dim=4, seed=seed)
    budget = LatentBudget(4, 3, 1)
    config = bb.ModelConfig(layers=2, heads=2, dim=16, vocab_size=world.vocab_needed, feature_dim_visual=4,
                            feature_dim_audio=4, max_sequence=64, init_std=0.3)
    state = bb.init_state(config, seed)
    episode = generate_episode(world, 0, budget)
    return world, budget, state, episode


def _loss_terms(state, episode, bank, budget, anchors):
    from .interleave import run_teacher_forced

    fv, fa = bank.encode(episode)
    seq = episode.sequence(fv, fa)
    plan = assign_timestamps(seq, bank.frame_rate, episode.segments, budget)
    run = run_teacher_forced(state, seq, plan, budget)
    nv, na = seq.n_visual, seq.n_audio
    text, _ = text_loss(run.logits, seq)
    latent = latent_loss(run.latents[0], anchors)
    pairs = sync_pairs(tc.index(run.inputs, slice(0, nv)), tc.index(run.inputs, slice(nv, nv + na)), plan)
    sync = sync_loss(pairs, tau_of(state["sync.log_tau"]))
    return {"text": text, "latent": latent, "sync": sync,
            "total": combine(text, latent, sync, LossWeights())}


def _model_check(suite: str, name: str, f: Callable[[], tc.Tensor], state, max_coords: int) -> CheckResult:
    params = state.parameters()
    err = tc.grad_check(lambda *_: f(), params, STEP, max_coords=max_coords)
    return _result(suite, name, err, GRAD_TOL)


def loss_gradients(max_coords: int = 24, seed: int = 0) -> list[CheckResult]:
    world, budget, state, episode = small_setup(seed)
    bank = EncoderBank(world)
    fv, fa = bank.encode(episode)
    hv, ha = bb.project_features(fv, fa, state)
    # anchors are fixed targets, so they are pooled once outside the probed function
    anchors = anchors_from_projected(episode.segments, hv.data, ha.data, bank.frame_rate, budget).anchors
    out = []
    for name in ("text", "latent", "sync", "total"):
        out.append(_model_check("losses", f"{name} loss through the model",
                                lambda n=name: _loss_terms(state, episode, bank, budget, anchors)[n],
                                state, max_coords))
    rng = np.random.default_rng(seed)
    v, a = tc.Tensor(rng.normal(size=(6, 5))), tc.Tensor(rng.normal(size=(6, 5)))
    lt = tc.Tensor(np.log(0.3))
    plan = ospe.PositionPlan(np.concatenate([np.arange(6.0)] * 2), ["x"] * 12)
    err = tc.grad_check(lambda v_, a_, t_: sync_loss(sync_pairs(v_, a_, plan), tau_of(t_)), [v, a, lt], STEP)
    out.append(_result("losses", "sync loss on raw features", err, GRAD_TOL))
    return out


def backbone_gradients(max_coords: int = 24, seed: int = 0) -> list[CheckResult]:
    world, budget, state, episode = small_setup(seed)
    rng = np.random.default_rng(seed + 1)
    x = tc.Tensor(rng.normal(size=(10, 16)))
    plan = ospe.PositionPlan(np.array([0, 1, 2, 3, 0, 1, 2, 3, 4, 5.0]), ["x"] * 10)
    w = rng.normal(size=(10, state.config.vocab_size))

    def reduction():
        _, logits, _ = bb.forward(x, plan, state)
        return tc.sum_(tc.mul(logits, w))

    out = [_model_check("backbone", "forward with rotary attention", reduction, state, max_coords)]
    err = tc.grad_check(lambda x_: reduction(), [x], STEP)
    out.append(_result("backbone", "forward w.r.t. inputs", err, GRAD_TOL))

    bank = EncoderBank(world)
    fv, fa = bank.encode(episode)
    # a random projection: the squared norm of a layer-normed state is nearly constant
    wz = rng.normal(size=(budget.total, state.config.dim))

    def latent_chain():
        from .interleave import run_teacher_forced

        seq = episode.sequence(fv, fa)
        run = run_teacher_forced(state, seq, assign_timestamps(seq, 1.0, episode.segments, budget), budget)
        return tc.sum_(tc.mul(run.latents[0], wz))

    out.append(_model_check("backbone", "latent self-feedback chain", latent_chain, state, max_coords))
    return out


def run_suite(suite: str = "all", max_coords: int = 24) -> list[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    out: list[CheckResult] = []
    with tc.use_dtype(np.float64):
        if suite in ("all", "ospe"):
            out += ospe_invariants() + ospe_gradient()
        if suite in ("all", "backbone"):
            out += backbone_gradients(max_coords)
        if suite in ("all", "losses"):
            out += loss_gradients(max_coords)
    return out
