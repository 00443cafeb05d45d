"""Timestamp-keyed rotary position embedding.

Visual frames and audio bins that cover the same moment share one physical
timestamp, so they receive identical rotations.  Latent states inherit the
midpoint of the segment their anchors were pooled from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import tensor as tc
from .errors import ContractError, DataError, ShapeError
from .sequence import HybridSequence, LatentBudget, LatentState, Stop, TextToken, Trigger

if TYPE_CHECKING:
    from .anchors import SegmentRef

REGIONS = ("visual-prompt", "audio-prompt", "text", "trigger", "latent-visual", "latent-audio", "stop")


@dataclass(frozen=True, eq=False)
class FrequencyBasis:
    dim: int
    base: float
    thetas: np.ndarray


def build_basis(dim: int, base: float = 10000.0) -> FrequencyBasis:
    if dim <= 0 or dim % 2:
        raise ContractError(f"rotary dimension must be even and positive, got {dim}")
    if base <= 1:
        raise ContractError(f"rotary base must exceed 1, got {base}")
    thetas = base ** (-2.0 * np.arange(dim // 2) / dim)
    return FrequencyBasis(dim, float(base), thetas)


def _pair_swap(x: np.ndarray) -> np.ndarray:
    # (h1, h2) -> (-h2, h1) on every adjacent pair
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def angles(t, basis: FrequencyBasis) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension cos and sin tables for timestamps ``t`` (shape ``t.shape + (dim,)``)."""
    ang = np.asarray(t, dtype=np.float64)[..., None] * basis.thetas
    return np.repeat(np.cos(ang), 2, axis=-1), np.repeat(np.sin(ang), 2, axis=-1)


def rotate(h: tc.Tensor, cos: np.ndarray, sin: np.ndarray) -> tc.Tensor:
    """``h * cos + R(h) * sin`` with precomputed tables broadcast over ``h``."""
    y = h.data * cos + _pair_swap(h.data) * sin

    def backward(g):
        return (g * cos - _pair_swap(g * sin),)

    return tc.custom_op(y, (h,), backward, "ospe")


def apply(h: tc.Tensor, t: float, basis: FrequencyBasis) -> tc.Tensor:
    if h.shape[-1] != basis.dim:
        raise ShapeError(f"ospe: vector length {h.shape[-1]} != basis dimension {basis.dim}")
    if not np.isfinite(t):
        raise ContractError("ospe timestamp must be finite")
    cos, sin = angles(t, basis)
    return rotate(h, cos, sin)


@dataclass
class PositionPlan:
    timestamps: np.ndarray
    tags: list[str]

    def __len__(self) -> int:
        return len(self.timestamps)

    def prefix(self, n: int) -> "PositionPlan":
        return PositionPlan(self.timestamps[:n], self.tags[:n])


def _split_even(n: int, parts: int) -> list[int]:
    # contiguous group sizes differing by at most one, larger groups first
    q, r = divmod(n, parts)
    return [q + 1 if i < r else q for i in range(parts)]


def _latent_times(refs: Sequence["SegmentRef"], modality: str, count: int) -> list[float] | None:
    mine = [r for r in refs if r.modality == modality]
    if count == 0:
        return []
    if not mine:
        return None
    times: list[float] = []
    for ref, size in zip(mine, _split_even(count, len(mine))):
        times += [0.5 * (ref.t_start + ref.t_end)] * size
    return times


class TimestampCursor:
    """Assigns timestamps one generated element at a time (the rule of :func:`assign_timestamps`)."""

    def __init__(self, seq: HybridSequence, frame_rate: float = 1.0,
                 segment_refs: Sequence["SegmentRef"] = (), budget: LatentBudget | None = None):
        if frame_rate <= 0:
            raise ContractError("frame rate must be positive")
        n_av = max(seq.n_visual, seq.n_audio)
        horizon = n_av / frame_rate
        for ref in segment_refs:
            if not (0.0 <= ref.t_start < ref.t_end <= horizon + 1e-9):
                raise DataError(f"segment [{ref.t_start}, {ref.t_end}] outside episode range [0, {horizon}]")
        self.refs = tuple(segment_refs)
        self.budget = LatentBudget.split(_phase_length(seq)) if budget is None else budget
        self.phase = -1
        self.phase_times: list[float | None] = []
        self.times = [i / frame_rate for i in range(seq.n_visual)] + [i / frame_rate for i in range(seq.n_audio)]
        self.tags = ["visual-prompt"] * seq.n_visual + ["audio-prompt"] * seq.n_audio
        self.counter = float(np.floor((n_av - 1) / frame_rate) + 1) if n_av else 0.0
        for _ in seq.question:
            self._tick("text")

    def _tick(self, tag: str) -> None:
        self.times.append(self.counter)
        self.tags.append(tag)
        self.counter += 1.0

    def _open_phase(self) -> None:
        self.phase += 1
        refs = [r for r in self.refs if getattr(r, "phase", 0) == self.phase]
        vis = _latent_times(refs, "visual", self.budget.visual)
        aud = _latent_times(refs, "audio", self.budget.audio)
        self.phase_times = (vis or [None] * self.budget.visual) + (aud or [None] * self.budget.audio)

    def feed(self, e) -> None:
        if isinstance(e, LatentState):
            if self.phase < 0 or e.index >= self.budget.total:
                raise DataError("latent state outside a phase of the budgeted length")
            t = self.phase_times[e.index]
            tag = "latent-visual" if e.index < self.budget.visual else "latent-audio"
            if t is None:
                self._tick(tag)
            else:
                self.times.append(t)
                self.tags.append(tag)
        elif isinstance(e, Trigger):
            self._open_phase()
            self._tick("trigger")
        elif isinstance(e, Stop):
            self._tick("stop")
        elif isinstance(e, TextToken):
            self._tick("text")
        else:
            raise DataError(f"{type(e).__name__} in the generated region")

    def plan(self) -> PositionPlan:
        return PositionPlan(np.asarray(self.times, dtype=np.float64), list(self.tags))


def assign_timestamps(seq: HybridSequence, frame_rate: float = 1.0,
                      segment_refs: Sequence["SegmentRef"] = (),
                      budget: LatentBudget | None = None) -> PositionPlan:
    """Physical timestamp and region tag for every position of ``seq``.

    Prompt frame ``i`` of either modality sits at ``i / frame_rate``.  Every
    other non-latent position takes the next value of a counter starting one
    second after the last prompt frame (at 0 without prompt features).  Latent
    positions of phase ``j`` take the midpoints of the segments cited for that
    phase; without a citation for their modality they continue the counter.
    """
    cursor = TimestampCursor(seq, frame_rate, segment_refs, budget)
    for e in seq.generated:
        cursor.feed(e)
    return cursor.plan()


def _phase_length(seq: HybridSequence) -> int:
    run = best = 0
    for e in seq.generated:
        run = run + 1 if isinstance(e, LatentState) else 0
        best = max(best, run)
    return best


def integer_plan(plan: PositionPlan) -> PositionPlan:
    """Same tags, ordinary integer positions (the OSPE ablation)."""
    return PositionPlan(np.arange(len(plan), dtype=np.float64), list(plan.tags))
