"""Training objectives: masked next-token loss, latent-anchor alignment, symmetric InfoNCE."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .errors import ContractError, DataError, NumericError
from .ospe import PositionPlan
from .sequence import HybridSequence, text_targets

TAU_INIT = 0.07
TAU_MIN, TAU_MAX = 1e-3, 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.005
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    text: float
    latent: float
    sync: float
    total: float
    n_text: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyncPairSet:
    visual: tc.Tensor  # [|T|, d]
    audio: tc.Tensor
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamps)


def text_loss(logits: tc.Tensor, sequence: HybridSequence, targets=None) -> tuple[tc.Tensor, int]:
    """Mean cross-entropy over positions whose next element is a discrete token.

    ``logits`` has one row per sequence position.  Passing ``targets`` (a
    ``(positions, ids)`` pair) overrides the mask derived from ``sequence``.
    """
    pos, ids = text_targets(sequence) if targets is None else targets
    if len(pos) == 0:
        raise ContractError("text loss has no supervised positions")
    return tc.cross_entropy(tc.index(logits, pos), ids), len(pos)


def latent_loss(states: tc.Tensor, anchors) -> tc.Tensor:
    """Mean squared distance between latent state k and anchor k."""
    anchors = np.asarray(getattr(anchors, "anchors", anchors))
    if states.shape != anchors.shape:
        raise ContractError(f"latent loss: states {states.shape} vs anchors {anchors.shape}")
    if len(anchors) == 0:
        raise ContractError("latent loss over zero states")
    diff = tc.sub(states, anchors)
    return tc.scale(tc.sum_(tc.mul(diff, diff)), 1.0 / len(anchors))


def sync_pairs(visual: tc.Tensor, audio: tc.Tensor, plan: PositionPlan, offset_visual: int = 0,
               offset_audio: int | None = None) -> SyncPairSet:
    """Pair visual row i with the audio row carrying the same timestamp."""
    if offset_audio is None:
        offset_audio = offset_visual + visual.shape[0]
    tv = plan.timestamps[offset_visual:offset_visual + visual.shape[0]]
    ta = plan.timestamps[offset_audio:offset_audio + audio.shape[0]]
    where = {t: j for j, t in enumerate(ta)}
    vi, ai = [], []
    for i, t in enumerate(tv):
        if t in where:
            vi.append(i)
            ai.append(where[t])
    vi_, ai_ = np.asarray(vi), np.asarray(ai)
    if len(vi) == visual.shape[0] and np.array_equal(vi_, ai_):
        return SyncPairSet(visual, audio, np.asarray(tv))
    return SyncPairSet(tc.index(visual, vi_), tc.index(audio, ai_), np.asarray(tv)[vi_])


def tau_of(log_tau: tc.Tensor) -> tc.Tensor:
    return tc.clamp(tc.exp(log_tau), TAU_MIN, TAU_MAX)


def sync_loss(pairs: SyncPairSet, tau) -> tc.Tensor:
    """Symmetric InfoNCE over cosine similarities of matched visual/audio features."""
    n = len(pairs)
    if n < 2:
        raise ContractError(f"sync loss needs at least 2 matched timestamps, got {n}")
    for name, t in (("visual", pairs.visual), ("audio", pairs.audio)):
        if (np.linalg.norm(t.data, axis=1) == 0).any():
            raise DataError(f"zero-norm {name} feature in sync pairs")
    tau = tc.as_tensor(tau)
    if (tau.data <= 0).any():
        raise ContractError("temperature must be positive")
    logits = tc.div(tc.cosine_similarity(pairs.visual, pairs.audio), tau)
    diag = np.arange(n)
    v2a = tc.cross_entropy(logits, diag)
    a2v = tc.cross_entropy(tc.transpose(logits), diag)
    return tc.scale(tc.add(v2a, a2v), 0.5)


def combine(text: tc.Tensor, latent: tc.Tensor, sync: tc.Tensor, weights: LossWeights) -> tc.Tensor:
    """Differentiable total; same arithmetic order as :func:`total_loss`."""
    return tc.add(tc.add(text, tc.scale(latent, weights.lambda1)), tc.scale(sync, weights.lambda2))


def total_loss(text: float, latent: float, sync: float, weights: LossWeights, n_text: int = 0) -> LossBreakdown:
    for name, value in (("text", text), ("latent", latent), ("sync", sync)):
        if not math.isfinite(value):
            raise NumericError(f"{name} loss is not finite")
    total = text + weights.lambda1 * latent + weights.lambda2 * sync
    return LossBreakdown(float(text), float(latent), float(sync), float(total), int(n_text))
