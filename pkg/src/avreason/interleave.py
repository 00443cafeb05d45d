"""Interleaved text/latent execution: teacher-forced runs and the decoding state machine.

Inside a latent phase the hidden state at the trigger position becomes latent
state 1; latent state ``k`` is the input at position ``trigger + k`` and its
output hidden state becomes latent state ``k + 1``.  The hidden state at the
last latent position is not used (the stop token is inserted, never predicted).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import backbone as bb
from . import tensor as tc
from .errors import CapacityError, ContractError, DataError, NumericError
from .ospe import PositionPlan, TimestampCursor
from .sequence import (EOA_ID, PAD, STOP_ID, TRIGGER_ID, HybridSequence, LatentBudget, LatentState,
                       Stop, TextToken, Trigger, validate_grammar)

ANSWER_ID = 4  # text marker: the tokens after it, up to end-of-answer, are the answer


@dataclass
class RunResult:
    """Everything a teacher-forced pass produced, in position order."""

    hidden: tc.Tensor  # [n, d]
    logits: tc.Tensor  # [n, |V|]
    latents: list  # one Tensor [K, d] per phase: the K latent states fed back
    attention: list  # per layer, array [heads, n, n]
    plan: PositionPlan
    inputs: tc.Tensor | None = None  # prompt embeddings [n_prompt, d]


def _chunks(seq: HybridSequence) -> list[tuple[int, int]]:
    """Half-open position ranges executed together: latent slots run alone."""
    out = []
    start = 0
    pos = seq.prompt_length
    for e in seq.generated:
        if isinstance(e, LatentState):
            if pos > start:
                out.append((start, pos))
            out.append((pos, pos + 1))
            start = pos + 1
        pos += 1
    if pos > start:
        out.append((start, pos))
    return out


def _pad_attention(parts: list[list[np.ndarray]], n: int) -> list[np.ndarray]:
    layers = []
    for i in range(len(parts[0])):
        rows = [np.pad(p[i], ((0, 0), (0, 0), (0, n - p[i].shape[2]))) for p in parts]
        layers.append(np.concatenate(rows, axis=1))
    return layers


def run_teacher_forced(state: bb.ModelState, seq: HybridSequence, plan: PositionPlan,
                       budget: LatentBudget, anchors: Sequence[np.ndarray] | None = None,
                       keep_attention: bool = False) -> RunResult:
    """Execute a full trajectory with text from the data and latents self-fed.

    With ``anchors`` (one ``[K, d]`` array per phase) the anchor vectors are fed
    back instead of the model's own states; the returned latents are still the
    model's hidden states.
    """
    n = len(seq)
    if len(plan) != n:
        raise ContractError(f"plan has {len(plan)} positions for a sequence of {n}")
    if n > state.config.max_sequence:
        raise CapacityError(f"sequence of {n} positions exceeds max_sequence {state.config.max_sequence}")
    violation = validate_grammar(seq, budget)
    if violation is not None:
        raise DataError(f"trajectory is not grammar-valid: {violation}")
    prompt = bb.embed_prompt(seq, state)
    elements = seq.elements()
    base = seq.prompt_length
    cache = bb.Cache()
    hidden_parts, logit_parts, att_parts = [], [], []
    latents: list[list[tc.Tensor]] = []
    last_hidden = None
    phase = -1
    for start, stop in _chunks(seq):
        e = elements[start]
        if isinstance(e, LatentState):
            if e.index == 0:
                phase += 1
                latents.append([last_hidden])
            if anchors is not None:
                x = tc.reshape(tc.Tensor(anchors[phase][e.index]), (1, state.config.dim))
            else:
                x = latents[phase][e.index]
        else:
            rows = []
            if start < base:
                rows.append(tc.index(prompt, slice(start, min(stop, base))))
            if stop > base:
                rows.append(bb.embed_elements(elements[max(start, base):stop], state))
            x = tc.concat(rows) if len(rows) > 1 else rows[0]
        out = bb.forward_chunk(x, plan.timestamps[start:stop], state, cache)
        last_hidden = tc.index(out.hidden, slice(out.hidden.shape[0] - 1, None))
        if isinstance(e, LatentState) and e.index + 1 < budget.total:
            latents[phase].append(last_hidden)
        hidden_parts.append(out.hidden)
        logit_parts.append(out.logits)
        if keep_attention:
            att_parts.append(out.attention)
    hidden = tc.concat(hidden_parts) if len(hidden_parts) > 1 else hidden_parts[0]
    logits = tc.concat(logit_parts) if len(logit_parts) > 1 else logit_parts[0]
    stacked = [tc.concat(z) for z in latents]
    attention = _pad_attention(att_parts, n) if keep_attention else []
    return RunResult(hidden, logits, stacked, attention, plan, prompt)


def latent_phase(state: bb.ModelState, context: HybridSequence, k: int,
                 frame_rate: float = 1.0, use_ospe: bool = True) -> list[LatentState]:
    """Generate ``k`` latent states after a context that ends with a trigger."""
    if k == 0:
        return []
    if not context.generated or not isinstance(context.generated[-1], Trigger):
        raise ContractError("latent phase context must end with a trigger")
    session = _Session(state, context, LatentBudget.split(k), frame_rate, (), use_ospe, False)
    return session.run_phase()


# ---------------------------------------------------------------- decoding

@dataclass
class Trace:
    tags: list = field(default_factory=list)  # region tag per generated position
    av_mass: list = field(default_factory=list)  # per generated position: array [layers, heads]


class _Session:
    """Incremental decoder over a growing sequence with a key/value cache."""

    def __init__(self, state, seq, budget, frame_rate, segment_refs, use_ospe, trace):
        self.state, self.seq, self.budget = state, seq, budget
        self.frame_rate, self.refs, self.use_ospe = frame_rate, tuple(segment_refs), use_ospe
        self.cache = bb.Cache()
        self.n_av = seq.n_visual + seq.n_audio
        self.trace = Trace() if trace else None
        self.last_hidden = None
        self.last_logits = None
        self.cursor = TimestampCursor(seq.prefix(seq.prompt_length), frame_rate, self.refs, budget)
        self._advance(bb.embed_prompt(seq, state), 0)
        if seq.generated:
            for e in seq.generated:
                self.cursor.feed(e)
            self._advance(bb.embed_elements(seq.generated, state), seq.prompt_length)

    def _advance(self, x: tc.Tensor, start: int) -> None:
        count = x.shape[0]
        n = start + count
        if n > self.state.config.max_sequence:
            raise CapacityError(f"decoding needs {n} positions, max_sequence is {self.state.config.max_sequence}")
        times = (np.asarray(self.cursor.times[start:n], dtype=np.float64) if self.use_ospe
                 else np.arange(start, n, dtype=np.float64))
        tags = self.cursor.tags
        out = bb.forward_chunk(x, times, self.state, self.cache)
        self.last_hidden = out.hidden.data[-1].copy()
        self.last_logits = out.logits.data[-1].copy()
        if self.trace is not None:
            for row in range(count):
                p = start + row
                if p < self.seq.prompt_length:
                    continue
                mass = np.stack([a[:, row, :self.n_av].sum(axis=-1) for a in out.attention])
                self.trace.tags.append(tags[p])
                self.trace.av_mass.append(mass)

    def push(self, element) -> None:
        self.seq.generated.append(element)
        self.cursor.feed(element)
        x = tc.reshape(bb.embed_element(element, self.state), (1, self.state.config.dim))
        self._advance(x, len(self.seq) - 1)

    def run_phase(self) -> list[LatentState]:
        k = self.budget.total
        room = self.state.config.max_sequence - len(self.seq)
        if room < k + 1:
            raise CapacityError(f"latent phase of {k} states needs {k + 1} positions, {room} left")
        if not self.seq.generated or not isinstance(self.seq.generated[-1], Trigger):
            raise ContractError("latent phase must follow a trigger")
        states = []
        for i in range(k):
            z = self.last_hidden
            if not np.isfinite(z).all():
                raise NumericError(f"latent state {i} is not finite")
            states.append(LatentState(i, z))
            self.push(states[-1])
        self.push(Stop())
        return states


def _choose(logits: np.ndarray, banned: set[int], mode: str, rng) -> int:
    allowed = np.ones(len(logits), dtype=bool)
    allowed[list(banned)] = False
    if mode == "greedy":
        return int(np.argmax(np.where(allowed, logits, -np.inf)))
    x = np.where(allowed, logits, -np.inf)
    p = np.exp(x - x.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def _answer_slot(session: _Session, answer_tokens: Sequence[int], mode: str, rng) -> None:
    allowed = np.asarray(sorted(set(int(t) for t in answer_tokens)))
    banned = set(range(len(session.last_logits))) - set(allowed.tolist())
    session.push(TextToken(_choose(session.last_logits, banned, mode, rng), answer=True))
    session.push(TextToken(EOA_ID))


def decode(state: bb.ModelState, prompt: HybridSequence, budget: LatentBudget = LatentBudget(),
           max_text: int = 8, mode: str = "greedy", seed: int = 0, segment_refs=(),
           frame_rate: float = 1.0, banned: Sequence[int] = (), use_ospe: bool = True,
           trace: bool = False, answer_tokens: Sequence[int] | None = None
           ) -> HybridSequence | tuple[HybridSequence, Trace]:
    """Decode a generated region after ``prompt``.

    Each decoding step picks a token from the last position's logits (greedy or
    sampled with ``seed``).  A trigger starts a phase of ``budget.total`` latent
    states followed by a forced stop.  Decoding ends at end-of-answer or after
    ``max_text`` decoded tokens; the final decoded token is never a trigger.
    Tokens between the answer marker and end-of-answer are marked as answers.

    With ``answer_tokens`` the answer slot is constrained: the token after the
    answer marker is chosen among ``answer_tokens`` and followed by a forced
    end-of-answer, and a run that ends without a marker gets one appended.
    """
    if mode not in ("greedy", "sampled"):
        raise ContractError(f"unknown decoding mode {mode!r}")
    if max_text < 1:
        raise ContractError("max_text must be at least 1")
    seq = HybridSequence(list(prompt.question), [], visual=prompt.visual, audio=prompt.audio)
    if prompt.visual is None:
        seq.n_visual = prompt.n_visual
    if prompt.audio is None:
        seq.n_audio = prompt.n_audio
    rng = np.random.default_rng(seed)
    session = _Session(state, seq, budget, frame_rate, segment_refs, use_ospe, trace)
    base_ban = {PAD, STOP_ID} | set(int(b) for b in banned)
    in_answer = False
    for step in range(max_text):
        ban = set(base_ban)
        if step == max_text - 1:
            ban.add(TRIGGER_ID)
        if answer_tokens is not None:
            ban.add(EOA_ID)  # the constrained slot closes the answer itself
        tok = _choose(session.last_logits, ban, mode, rng)
        if tok == TRIGGER_ID:
            room = state.config.max_sequence - len(seq)
            if room < budget.total + 2:
                raise CapacityError(f"trigger needs {budget.total + 2} positions for its phase, {room} left")
            session.push(Trigger())
            session.run_phase()
            continue
        is_answer = in_answer and tok != EOA_ID
        session.push(TextToken(tok, answer=is_answer))
        if tok == ANSWER_ID:
            in_answer = True
            if answer_tokens is not None:
                _answer_slot(session, answer_tokens, mode, rng)
                break
        if tok == EOA_ID:
            break
    if answer_tokens is not None and not seq.answer():
        session.push(TextToken(ANSWER_ID))
        _answer_slot(session, answer_tokens, mode, rng)
    if trace:
        return seq, session.trace
    return seq
