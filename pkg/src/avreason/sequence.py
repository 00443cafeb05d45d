"""Hybrid text/latent sequences and their grammar.

A sequence is a prompt (visual features, audio features, question tokens)
followed by a generated region that must match::

    (Text* (Trigger Latent{K} Stop)?)* Text+

Global positions run over the prompt first (visual, audio, question), then the
generated region.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ContractError, DataError

PAD, TRIGGER_ID, STOP_ID, EOA_ID = 0, 1, 2, 3


@dataclass(frozen=True)
class TextToken:
    id: int
    answer: bool = False


@dataclass(frozen=True)
class Trigger:
    id = TRIGGER_ID


@dataclass(frozen=True)
class Stop:
    id = STOP_ID


@dataclass(frozen=True, eq=False)
class LatentState:
    """Latent slot ``index`` (0-based within its phase); ``vector`` is None in templates."""

    index: int
    vector: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class VisualFeature:
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class AudioFeature:
    vector: np.ndarray


HybridElement = Union[TextToken, Trigger, LatentState, Stop, VisualFeature, AudioFeature]


@dataclass(frozen=True)
class LatentBudget:
    total: int = 40
    visual: int = 32
    audio: int = 8

    def __post_init__(self):
        if self.total < 0 or self.visual < 0 or self.audio < 0:
            raise ContractError("latent budget entries must be non-negative")
        if self.visual + self.audio != self.total:
            raise ContractError(f"K_v + K_a = {self.visual + self.audio} != K = {self.total}")

    @classmethod
    def split(cls, total: int, visual_fraction: float = 0.8) -> "LatentBudget":
        visual = int(round(total * visual_fraction))
        return cls(total, visual, total - visual)


@dataclass
class HybridSequence:
    question: list[int]
    generated: list = field(default_factory=list)
    n_visual: int = 0
    n_audio: int = 0
    visual: np.ndarray | None = None
    audio: np.ndarray | None = None

    def __post_init__(self):
        if self.visual is not None:
            self.n_visual = len(self.visual)
        if self.audio is not None:
            self.n_audio = len(self.audio)

    @property
    def prompt_length(self) -> int:
        return self.n_visual + self.n_audio + len(self.question)

    def __len__(self) -> int:
        return self.prompt_length + len(self.generated)

    def prefix(self, n: int) -> "HybridSequence":
        """The first ``n`` positions (``n`` must cover the prompt)."""
        if n < self.prompt_length:
            raise ContractError("prefix must include the whole prompt")
        out = HybridSequence(self.question, self.generated[:n - self.prompt_length],
                             self.n_visual, self.n_audio)
        out.visual, out.audio = self.visual, self.audio
        return out

    def prompt_elements(self) -> list:
        if (self.n_visual and self.visual is None) or (self.n_audio and self.audio is None):
            raise DataError("sequence has no attached prompt features")
        out: list = [VisualFeature(v) for v in (self.visual if self.n_visual else [])]
        out += [AudioFeature(a) for a in (self.audio if self.n_audio else [])]
        out += [TextToken(i) for i in self.question]
        return out

    def elements(self) -> list:
        return self.prompt_elements() + list(self.generated)

    def answer(self) -> list[int]:
        return [e.id for e in self.generated if isinstance(e, TextToken) and e.answer]

    def latent_phases(self) -> list[int]:
        """Global positions of every Trigger in the generated region."""
        base = self.prompt_length
        return [base + i for i, e in enumerate(self.generated) if isinstance(e, Trigger)]


@dataclass(frozen=True)
class Violation:
    position: int
    message: str

    def __str__(self) -> str:
        return f"position {self.position}: {self.message}"


def validate_grammar(seq: HybridSequence | list, budget: LatentBudget) -> Violation | None:
    """First grammar violation in the generated region, or None if it is valid.

    Positions are indices into the generated region.
    """
    gen = seq.generated if isinstance(seq, HybridSequence) else list(seq)
    k = budget.total
    i, n = 0, len(gen)
    while i < n:
        e = gen[i]
        if isinstance(e, TextToken):
            i += 1
        elif isinstance(e, Trigger):
            for j in range(k):
                p = i + 1 + j
                if p >= n:
                    return Violation(p, f"sequence ends inside a latent phase after {j} of {k} states")
                if not isinstance(gen[p], LatentState):
                    return Violation(p, f"expected latent state {j} of {k}, found {type(gen[p]).__name__}")
                v = gen[p].vector
                if v is not None and not np.isfinite(v).all():
                    return Violation(p, "latent state is not finite")
            p = i + 1 + k
            if p >= n:
                return Violation(p, "latent phase is not closed by a stop token")
            if not isinstance(gen[p], Stop):
                return Violation(p, f"expected stop after {k} latent states, found {type(gen[p]).__name__}")
            i = p + 1
        elif isinstance(e, LatentState):
            return Violation(i, "latent state outside a latent phase")
        elif isinstance(e, Stop):
            return Violation(i, "stop token without an open latent phase")
        else:
            return Violation(i, f"{type(e).__name__} is not allowed in the generated region")
    if n == 0 or not isinstance(gen[-1], TextToken):
        return Violation(n, "generated region must end with a text token")
    return None


def text_targets(seq: HybridSequence) -> tuple[np.ndarray, np.ndarray]:
    """Positions supervised by the next-token loss and their target ids.

    Position ``p`` predicts element ``p + 1`` when that element is a text token
    or a trigger.  Stops and latent states are never targets.
    """
    base = seq.prompt_length
    pos, ids = [], []
    for i, e in enumerate(seq.generated):
        if isinstance(e, (TextToken, Trigger)):
            if base + i == 0:
                continue
            pos.append(base + i - 1)
            ids.append(e.id)
    return np.asarray(pos, dtype=np.int64), np.asarray(ids, dtype=np.int64)


def dump(seq: HybridSequence | list) -> str:
    """One line per generated element."""
    gen = seq.generated if isinstance(seq, HybridSequence) else seq
    lines = []
    for e in gen:
        if isinstance(e, TextToken):
            lines.append(f"{'ANSWER' if e.answer else 'TEXT'} {e.id}")
        elif isinstance(e, Trigger):
            lines.append("TRIGGER")
        elif isinstance(e, LatentState):
            lines.append(f"LATENT {e.index}")
        elif isinstance(e, Stop):
            lines.append("STOP")
        else:
            raise DataError(f"cannot dump {type(e).__name__} in the generated region")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_dump(text: str) -> list:
    out: list = []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            kind = parts[0]
            if kind in ("TEXT", "ANSWER") and len(parts) == 2:
                out.append(TextToken(int(parts[1]), answer=kind == "ANSWER"))
            elif kind == "TRIGGER" and len(parts) == 1:
                out.append(Trigger())
            elif kind == "STOP" and len(parts) == 1:
                out.append(Stop())
            elif kind == "LATENT" and len(parts) == 2:
                out.append(LatentState(int(parts[1])))
            else:
                raise ValueError(line)
        except ValueError:
            raise DataError(f"line {lineno}: cannot parse {line!r}") from None
    return out
