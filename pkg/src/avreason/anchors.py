"""Anchor sequences: cited audio-visual segments pooled into K dense targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ContractError, DataError
from .sequence import LatentBudget

if TYPE_CHECKING:
    from .backbone import ModelState
    from .synthworld import EncoderBank, Episode

MODALITIES = ("visual", "audio")


@dataclass(frozen=True)
class SegmentRef:
    modality: str
    t_start: float
    t_end: float
    ident: str = ""
    phase: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        if not self.t_start < self.t_end:
            raise DataError(f"empty segment [{self.t_start}, {self.t_end}]")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.t_start + self.t_end)

    def frame_indices(self, n_frames: int, frame_rate: float) -> np.ndarray:
        """Frames whose timestamp lies inside the closed window."""
        t = np.arange(n_frames) / frame_rate
        idx = np.nonzero((t >= self.t_start - 1e-9) & (t <= self.t_end + 1e-9))[0]
        if idx.size == 0:
            raise DataError(f"segment [{self.t_start}, {self.t_end}] covers no frame")
        return idx


@dataclass
class AnchorSequence:
    anchors: np.ndarray  # [K, d], visual anchors first
    n_visual: int
    n_audio: int
    source: list[SegmentRef] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.anchors)


def bin_sizes(n: int, m: int) -> list[int]:
    """Sizes of ``m`` contiguous bins over ``n`` items, larger bins first."""
    q, r = divmod(n, m)
    return [q + 1 if i < r else q for i in range(m)]


def norm_weights(frames: np.ndarray) -> np.ndarray:
    """Pooling weights of one bin: each frame's L2 norm over the bin's norm sum."""
    norms = np.linalg.norm(frames, axis=1)
    total = norms.sum()
    if total == 0:
        return np.full(len(frames), 1.0 / len(frames))
    return norms / total


def l2_pool(frames, target: int) -> np.ndarray:
    """Compress ``N`` frames to ``target`` vectors by L2-norm-weighted pooling.

    Frames are split into contiguous bins whose sizes differ by at most one
    (larger bins first); each output is the norm-weighted average of its bin.
    An all-zero bin pools to the zero vector.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or len(frames) == 0:
        raise ContractError("l2_pool needs a non-empty list of equal-length vectors")
    if not 1 <= target <= len(frames):
        raise ContractError(f"cannot pool {len(frames)} frames into {target} bins")
    out = np.empty((target, frames.shape[1]))
    start = 0
    for i, size in enumerate(bin_sizes(len(frames), target)):
        chunk = frames[start:start + size]
        out[i] = norm_weights(chunk) @ chunk
        start += size
    return out


def stretch(frames: np.ndarray, target: int) -> np.ndarray:
    """Repeat frames in order until there are at least ``target`` of them."""
    if len(frames) >= target:
        return frames
    return np.repeat(frames, bin_sizes(target, len(frames)), axis=0)


def gather_frames(refs: Sequence[SegmentRef], projected: np.ndarray, frame_rate: float) -> np.ndarray:
    """Frames of every cited segment, concatenated in citation order."""
    return np.concatenate([projected[r.frame_indices(len(projected), frame_rate)] for r in refs])


def anchors_from_projected(refs: Sequence[SegmentRef], visual: np.ndarray, audio: np.ndarray,
                           frame_rate: float, budget: LatentBudget) -> AnchorSequence:
    """Anchors from frames already projected into the backbone's input space."""
    parts = []
    for modality, frames, count in (("visual", visual, budget.visual), ("audio", audio, budget.audio)):
        if count == 0:
            continue
        mine = [r for r in refs if r.modality == modality]
        if not mine:
            raise DataError(f"no {modality} segment cited but {count} {modality} anchors requested")
        parts.append(l2_pool(stretch(gather_frames(mine, frames, frame_rate), count), count))
    d = visual.shape[1] if visual.ndim == 2 else audio.shape[1]
    anchors = np.concatenate(parts) if parts else np.zeros((0, d))
    return AnchorSequence(anchors, budget.visual, budget.audio, list(refs))


def build_anchor_sequence(refs: Sequence[SegmentRef], episode: "Episode", encoders: "EncoderBank",
                          state: "ModelState", budget: LatentBudget) -> AnchorSequence:
    """Encode the episode, project both streams to the model width, and pool the cited segments."""
    fv, fa = encoders.encode(episode)
    visual = fv @ state["proj.visual"].data
    audio = fa @ state["proj.audio"].data
    return anchors_from_projected(refs, visual, audio, encoders.frame_rate, budget)
